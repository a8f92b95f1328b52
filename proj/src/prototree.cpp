#include "protolab/prototree.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace protolab {

double route_probability(const LatentMap& z, const Prototype& node) {
  const auto grid = squared_l2_map(z, node.vector);
  const double d_min = *std::min_element(grid.values.begin(), grid.values.end());
  return std::exp(-d_min);
}

bool DecisionPath::operator==(const DecisionPath& other) const {
  if (leaf != other.leaf || steps.size() != other.steps.size()) return false;
  for (std::size_t i = 0; i < steps.size(); ++i) {
    if (steps[i].node != other.steps[i].node || steps[i].present != other.steps[i].present) return false;
  }
  return true;
}

ProtoTree::ProtoTree(const ProtoTreeConfig& config, std::uint64_t seed)
    : config_(config), extractor_(config.extractor, seed) {
  if (config.depth < 1 || config.depth > 10) throw std::invalid_argument("tree depth must be in [1, 10]");
  if (config.num_classes < 1) throw std::invalid_argument("num_classes must be >= 1");
  if (!(config.epsilon > 0.0)) throw std::invalid_argument("epsilon must be > 0");
  std::mt19937_64 rng(seed ^ 0x5851f42d4c957f2dULL);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int D = extractor_.latent_depth();
  for (int n = 0; n < num_internal(); ++n) {
    Prototype p;
    p.id = n;
    p.vector.resize(static_cast<std::size_t>(D));
    for (auto& v : p.vector) v = unit(rng);
    nodes_.push_back(std::move(p));
  }
  leaf_logits_.assign(static_cast<std::size_t>(num_leaves()),
                      std::vector<double>(static_cast<std::size_t>(config.num_classes), 0.0));
  std::normal_distribution<double> small(0.0, 0.01);
  for (auto& leaf : leaf_logits_) for (auto& v : leaf) v = small(rng);
}

std::vector<double> ProtoTree::leaf_distribution(int leaf) const {
  const auto& logits = leaf_logits_.at(static_cast<std::size_t>(leaf));
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double sum = 0.0;
  for (std::size_t c = 0; c < logits.size(); ++c) sum += out[c] = std::exp(logits[c] - mx);
  for (auto& v : out) v /= sum;
  return out;
}

ProtoTree::Output ProtoTree::forward(const LatentMap& z) const {
  Output out;
  const auto act = activate(z, nodes_, config_.epsilon);
  out.min_distance = act.min_distance;
  out.argmin = act.argmin;
  out.p_right.resize(nodes_.size());
  for (std::size_t n = 0; n < nodes_.size(); ++n) out.p_right[n] = std::exp(-act.min_distance[n]);

  const int L = num_leaves();
  out.leaf_probability.assign(static_cast<std::size_t>(L), 0.0);
  out.distribution.assign(static_cast<std::size_t>(config_.num_classes), 0.0);
  for (int l = 0; l < L; ++l) {
    double prob = 1.0;
    int node = 0;
    for (int level = config_.depth - 1; level >= 0; --level) {
      const int right = (l >> level) & 1;
      const double p = out.p_right[static_cast<std::size_t>(node)];
      prob *= right ? p : 1.0 - p;
      node = 2 * node + 1 + right;
    }
    out.leaf_probability[l] = prob;
    const auto q = leaf_distribution(l);
    for (int c = 0; c < config_.num_classes; ++c) out.distribution[c] += prob * q[c];
  }
  return out;
}

DecisionPath ProtoTree::extract_decision_path(const LatentMap& z) const {
  const auto act = activate(z, nodes_, config_.epsilon);
  DecisionPath path;
  int node = 0;
  for (int level = 0; level < config_.depth; ++level) {
    DecisionStep step;
    step.node = node;
    step.p_right = std::exp(-act.min_distance[static_cast<std::size_t>(node)]);
    step.present = step.p_right >= kPresentThreshold;
    step.match_row = act.argmin[static_cast<std::size_t>(node)] / z.width;
    step.match_col = act.argmin[static_cast<std::size_t>(node)] % z.width;
    path.steps.push_back(step);
    node = 2 * node + 1 + (step.present ? 1 : 0);
  }
  path.leaf = node - num_internal();
  const auto q = leaf_distribution(path.leaf);
  path.predicted_class = static_cast<int>(std::max_element(q.begin(), q.end()) - q.begin());
  return path;
}

bool ProtoTree::operator==(const ProtoTree& other) const {
  return config_.depth == other.config_.depth && config_.num_classes == other.config_.num_classes &&
         extractor_ == other.extractor_ && nodes_ == other.nodes_ && leaf_logits_ == other.leaf_logits_;
}

TreeObjective tree_objective(const ProtoTree& tree, const LatentMap& z, int label, bool latent_grad) {
  if (label < 0 || label >= tree.num_classes()) throw std::invalid_argument("label out of range");
  const auto out = tree.forward(z);
  const int L = tree.num_leaves();
  const int h = tree.depth();
  const int C = tree.num_classes();
  const int D = z.depth;
  const auto& nodes = tree.prototypes();

  std::vector<std::vector<double>> q(static_cast<std::size_t>(L));
  double p_label = 0.0;
  for (int l = 0; l < L; ++l) {
    q[l] = tree.leaf_distribution(l);
    p_label += out.leaf_probability[l] * q[l][label];
  }
  p_label = std::max(p_label, 1e-300);

  TreeObjective obj;
  obj.loss = -std::log(p_label);
  obj.grad_leaf.assign(static_cast<std::size_t>(L), std::vector<double>(static_cast<std::size_t>(C), 0.0));
  std::vector<double> g_p(nodes.size(), 0.0);

  for (int l = 0; l < L; ++l) {
    const double pi = out.leaf_probability[l];
    for (int c = 0; c < C; ++c) {
      obj.grad_leaf[l][c] = -pi / p_label * q[l][label] * ((c == label ? 1.0 : 0.0) - q[l][c]);
    }
    const double g_pi = -q[l][label] / p_label;
    // path factors, then d pi / d p_n as the product of the other factors
    std::vector<int> path_nodes;
    std::vector<int> dirs;
    std::vector<double> factors;
    int node = 0;
    for (int level = h - 1; level >= 0; --level) {
      const int right = (l >> level) & 1;
      const double p = out.p_right[static_cast<std::size_t>(node)];
      path_nodes.push_back(node);
      dirs.push_back(right);
      factors.push_back(right ? p : 1.0 - p);
      node = 2 * node + 1 + right;
    }
    for (std::size_t k = 0; k < factors.size(); ++k) {
      double others = 1.0;
      for (std::size_t k2 = 0; k2 < factors.size(); ++k2) {
        if (k2 != k) others *= factors[k2];
      }
      g_p[static_cast<std::size_t>(path_nodes[k])] += g_pi * others * (dirs[k] ? 1.0 : -1.0);
    }
  }

  obj.grad_prototypes.assign(nodes.size() * D, 0.0);
  if (latent_grad) obj.grad_latent.assign(static_cast<std::size_t>(z.num_patches()) * D, 0.0);
  for (std::size_t n = 0; n < nodes.size(); ++n) {
    const double g_d = -out.p_right[n] * g_p[n];
    if (g_d == 0.0) continue;
    const int a = out.argmin[n];
    const auto patch = z.patch(a);
    for (int d = 0; d < D; ++d) {
      const double diff = static_cast<double>(patch[d]) - nodes[n].vector[d];
      obj.grad_prototypes[n * D + d] -= 2.0 * diff * g_d;
      if (latent_grad) obj.grad_latent[static_cast<std::size_t>(a) * D + d] += 2.0 * diff * g_d;
    }
  }
  return obj;
}

namespace {

std::vector<const Sample*> train_samples(const Dataset& data) {
  std::vector<const Sample*> out;
  for (const auto& s : data.samples) {
    if (s.split == Split::train) out.push_back(&s);
  }
  return out;
}

std::vector<std::vector<std::size_t>> make_batches(std::size_t n, int batch_size, std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < n; i += static_cast<std::size_t>(batch_size)) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
  }
  return batches;
}

struct TreeOptimizer {
  std::vector<AdamState<double>> protos;
  std::vector<AdamState<double>> leaves;
  TreeOptimizer(std::size_t n, std::size_t l) : protos(n), leaves(l) {}

  void step_leaves(ProtoTree& tree, const std::vector<std::vector<double>>& g, const AdamConfig& cfg) {
    for (std::size_t l = 0; l < g.size(); ++l) leaves[l].update(std::span<double>(tree.leaf_logits()[l]), g[l], cfg);
  }
  void step_protos(ProtoTree& tree, const std::vector<double>& g, int D, const AdamConfig& cfg) {
    auto& nodes = tree.mutable_prototypes();
    for (std::size_t n = 0; n < nodes.size(); ++n) {
      protos[n].update(std::span<double>(nodes[n].vector),
                       std::span<const double>(g.data() + n * D, static_cast<std::size_t>(D)), cfg);
    }
  }
};

// Weighted Gini impurity of a class histogram.
double gini(const std::vector<double>& counts) {
  const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
  if (total <= 0.0) return 0.0;
  double sq = 0.0;
  for (double c : counts) sq += (c / total) * (c / total);
  return total * (1.0 - sq);
}

// Decision-tree style initialization. Random patches are mostly background
// that every image contains, and gradients through exp(-d) from such a start
// never find the class-bearing parts. So:
//  1. draw candidate patches from training latents;
//  2. the root takes the candidate and distance threshold with the best hard
//     Gini split, and the last conv layer is rescaled (ReLU and max pooling
//     commute with positive scaling) so that threshold routes at p = 0.5;
//  3. every other node, in heap order, takes the candidate with the best soft
//     split of the label mass reaching it;
//  4. leaves start at the log class frequencies of the mass they receive.
// Labels only steer the choice; node prototypes stay class-agnostic patches.
void greedy_seed(ProtoTree& tree, std::vector<LatentMap>& latents, const std::vector<int>& labels,
                 std::mt19937_64& rng) {
  constexpr std::size_t kCandidates = 256, kProbe = 600;
  const int C = tree.num_classes();
  std::uniform_int_distribution<std::size_t> pick(0, latents.size() - 1);

  std::vector<std::size_t> probe(latents.size());
  std::iota(probe.begin(), probe.end(), std::size_t{0});
  std::shuffle(probe.begin(), probe.end(), rng);
  probe.resize(std::min(kProbe, probe.size()));

  std::vector<std::vector<double>> cands;
  for (std::size_t k = 0; k < kCandidates; ++k) {
    const auto& z = latents[pick(rng)];
    const auto patch = z.patch(std::uniform_int_distribution<int>(0, z.num_patches() - 1)(rng));
    cands.emplace_back(patch.begin(), patch.end());
  }
  // dist[k][i]: nearest-patch distance from candidate k to probe image i.
  std::vector<std::vector<double>> dist(cands.size(), std::vector<double>(probe.size()));
  for (std::size_t k = 0; k < cands.size(); ++k) {
    for (std::size_t i = 0; i < probe.size(); ++i) {
      const auto grid = squared_l2_map(latents[probe[i]], cands[k]);
      dist[k][i] = *std::min_element(grid.values.begin(), grid.values.end());
    }
  }

  // Root: best hard threshold split; the scale puts that threshold at p = 0.5.
  double best_gain = -1.0, threshold = 1.0;
  std::size_t root = 0;
  std::vector<double> all(static_cast<std::size_t>(C), 0.0);
  for (std::size_t i : probe) all[static_cast<std::size_t>(labels[i])] += 1.0;
  const double base = gini(all);
  std::vector<std::size_t> order(probe.size());
  for (std::size_t k = 0; k < cands.size(); ++k) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dist[k][a] < dist[k][b]; });
    std::vector<double> near(static_cast<std::size_t>(C), 0.0), far = all;
    for (std::size_t r = 0; r + 1 < order.size(); ++r) {
      const auto lab = static_cast<std::size_t>(labels[probe[order[r]]]);
      near[lab] += 1.0;
      far[lab] -= 1.0;
      const double lo = dist[k][order[r]], hi = dist[k][order[r + 1]];
      if (!(hi > lo) || !(lo > 0.0)) continue;
      const double gain = base - gini(near) - gini(far);
      if (gain > best_gain) {
        best_gain = gain;
        root = k;
        threshold = 0.5 * (lo + hi);
      }
    }
  }
  const double scale2 = std::log(2.0) / threshold;
  const float scale = static_cast<float>(std::sqrt(scale2));
  auto& last = tree.mutable_extractor().layers().back();
  for (auto& w : last.weight) w *= scale;
  for (auto& b : last.bias) b *= scale;
  for (auto& z : latents) for (auto& v : z.values) v *= scale;
  for (auto& c : cands) for (auto& v : c) v *= scale;

  std::vector<std::vector<double>> p_right(cands.size(), std::vector<double>(probe.size()));
  for (std::size_t k = 0; k < cands.size(); ++k) {
    for (std::size_t i = 0; i < probe.size(); ++i) p_right[k][i] = std::exp(-dist[k][i] * scale2);
  }

  // Soft greedy growth in heap order; mass[n][i] is the path probability of
  // probe image i at node n.
  const int internal = tree.num_internal();
  std::vector<std::vector<double>> mass(static_cast<std::size_t>(2 * internal + 1));
  mass[0].assign(probe.size(), 1.0);
  std::vector<std::size_t> chosen(static_cast<std::size_t>(internal));
  for (int n = 0; n < internal; ++n) {
    const auto& w = mass[static_cast<std::size_t>(n)];
    std::size_t best = root;
    if (n > 0) {
      double best_cost = std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < cands.size(); ++k) {
        std::vector<double> left(static_cast<std::size_t>(C), 0.0), right(static_cast<std::size_t>(C), 0.0);
        for (std::size_t i = 0; i < probe.size(); ++i) {
          const auto lab = static_cast<std::size_t>(labels[probe[i]]);
          right[lab] += w[i] * p_right[k][i];
          left[lab] += w[i] * (1.0 - p_right[k][i]);
        }
        const double cost = gini(left) + gini(right);
        if (cost < best_cost) {
          best_cost = cost;
          best = k;
        }
      }
    }
    chosen[static_cast<std::size_t>(n)] = best;
    auto& l = mass[static_cast<std::size_t>(2 * n + 1)];
    auto& r = mass[static_cast<std::size_t>(2 * n + 2)];
    l.resize(probe.size());
    r.resize(probe.size());
    for (std::size_t i = 0; i < probe.size(); ++i) {
      r[i] = w[i] * p_right[best][i];
      l[i] = w[i] - r[i];
    }
  }

  auto& nodes = tree.mutable_prototypes();
  for (int n = 0; n < internal; ++n) nodes[static_cast<std::size_t>(n)].vector = cands[chosen[static_cast<std::size_t>(n)]];
  for (int leaf = 0; leaf < tree.num_leaves(); ++leaf) {
    const auto& w = mass[static_cast<std::size_t>(internal + leaf)];
    std::vector<double> counts(static_cast<std::size_t>(C), 1.0);  // add-one smoothing
    for (std::size_t i = 0; i < probe.size(); ++i) counts[static_cast<std::size_t>(labels[probe[i]])] += w[i];
    const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
    for (int c = 0; c < C; ++c) tree.leaf_logits()[static_cast<std::size_t>(leaf)][static_cast<std::size_t>(c)] =
        std::log(counts[static_cast<std::size_t>(c)] / total);
  }
}

// Mean negative log-likelihood with every node distance multiplied by f.
double scaled_nll(const ProtoTree& tree, const std::vector<std::vector<double>>& dmin, const std::vector<int>& labels,
                  double f) {
  std::vector<std::vector<double>> q;
  for (int l = 0; l < tree.num_leaves(); ++l) q.push_back(tree.leaf_distribution(l));
  double nll = 0.0;
  for (std::size_t i = 0; i < dmin.size(); ++i) {
    double p_label = 0.0;
    for (int l = 0; l < tree.num_leaves(); ++l) {
      double prob = 1.0;
      int node = 0;
      for (int level = tree.depth() - 1; level >= 0; --level) {
        const int right = (l >> level) & 1;
        const double p = std::exp(-f * dmin[i][static_cast<std::size_t>(node)]);
        prob *= right ? p : 1.0 - p;
        node = 2 * node + 1 + right;
      }
      p_label += prob * q[static_cast<std::size_t>(l)][static_cast<std::size_t>(labels[i])];
    }
    nll -= std::log(std::max(p_label, 1e-300));
  }
  return nll / static_cast<double>(dmin.size());
}

// Nothing in exp(-d) routing resists a global growth of the latent scale,
// and joint training drifts that way until every node routes left and the
// gradients vanish. Scaling the latent by s scales every distance by s^2
// exactly, so the best global scale is a 1-D search; it is applied to the
// last conv layer and the node vectors.
void refit_scale(ProtoTree& tree, const std::vector<const Sample*>& probe) {
  std::vector<std::vector<double>> dmin;
  std::vector<int> labels;
  for (const auto* s : probe) {
    dmin.push_back(tree.forward(tree.encode(s->image)).min_distance);
    labels.push_back(s->label);
  }
  double best_f = 1.0, best = scaled_nll(tree, dmin, labels, 1.0);
  for (int k = -8; k <= 8; ++k) {
    const double f = std::exp2(k / 4.0);
    const double v = scaled_nll(tree, dmin, labels, f);
    if (v < best) {
      best = v;
      best_f = f;
    }
  }
  if (best_f == 1.0) return;
  const double s = std::sqrt(best_f);
  auto& last = tree.mutable_extractor().layers().back();
  for (auto& w : last.weight) w *= static_cast<float>(s);
  for (auto& b : last.bias) b *= static_cast<float>(s);
  for (auto& n : tree.mutable_prototypes()) for (auto& v : n.vector) v *= s;
}

void accumulate(std::vector<std::vector<double>>& acc, const std::vector<std::vector<double>>& g) {
  for (std::size_t l = 0; l < acc.size(); ++l) {
    for (std::size_t c = 0; c < acc[l].size(); ++c) acc[l][c] += g[l][c];
  }
}

}  // namespace

TreeTrainResult train_tree(const TrainConfig& config, const ProtoTreeConfig& tree_config, const Dataset& data) {
  ProtoTree initial(tree_config, config.seed);
  if (config.warmup_epochs + config.joint_epochs > 0) {
    // Features are pretrained with a ProtoPNet on the same schedule; see the
    // header for why the tree cannot learn them from scratch.
    ProtoPNetConfig pnet;
    pnet.extractor = tree_config.extractor;
    pnet.layer.per_class_count = 2;
    pnet.num_classes = tree_config.num_classes;
    TrainConfig pre = config;
    pre.last_layer_epochs = 0;
    initial.mutable_extractor() = train(pre, ProtoPNet(pnet, config.seed), data).model.extractor();
  }
  return train_tree(config, std::move(initial), data);
}

TreeTrainResult train_tree(const TrainConfig& config, ProtoTree initial, const Dataset& data) {
  config.validate();
  TreeTrainResult result{std::move(initial), {}};
  ProtoTree& tree = result.tree;
  const auto samples = train_samples(data);
  if (samples.empty()) throw std::invalid_argument("dataset has no training samples");
  for (const auto* s : samples) {
    if (s->label < 0 || s->label >= tree.num_classes()) throw std::invalid_argument("label out of range");
  }

  std::mt19937_64 rng(config.seed * 6364136223846793005ULL + 0x2545f4914f6cdd1dULL);
  const int D = tree.extractor().latent_depth();
  const std::size_t n_nodes = tree.prototypes().size();
  const std::size_t n_leaves = static_cast<std::size_t>(tree.num_leaves());
  const int C = tree.num_classes();
  int step = 0;
  TreeOptimizer opt(n_nodes, n_leaves);
  const AdamConfig proto_cfg{config.lr_prototypes};
  const AdamConfig leaf_cfg{config.lr_head};

  const bool gradient_stages = config.warmup_epochs + config.joint_epochs > 0;
  std::vector<LatentMap> latents;
  if (gradient_stages) {
    latents.reserve(samples.size());
    std::vector<int> labels;
    for (const auto* s : samples) {
      latents.push_back(tree.encode(s->image));
      labels.push_back(s->label);
    }
    greedy_seed(tree, latents, labels, rng);
  }

  auto zero_leaf = [&] {
    return std::vector<std::vector<double>>(n_leaves, std::vector<double>(static_cast<std::size_t>(C), 0.0));
  };

  for (int epoch = 0; epoch < config.warmup_epochs; ++epoch) {
    for (const auto& batch : make_batches(samples.size(), config.batch_size, rng)) {
      std::vector<double> g_proto(n_nodes * D, 0.0);
      auto g_leaf = zero_leaf();
      LossRecord rec{"warmup", epoch, step};
      for (std::size_t idx : batch) {
        auto obj = tree_objective(tree, latents[idx], samples[idx]->label, false);
        for (std::size_t k = 0; k < g_proto.size(); ++k) g_proto[k] += obj.grad_prototypes[k];
        accumulate(g_leaf, obj.grad_leaf);
        rec.total += obj.loss;
      }
      const double inv = 1.0 / static_cast<double>(batch.size());
      for (auto& g : g_proto) g *= inv;
      for (auto& row : g_leaf) for (auto& g : row) g *= inv;
      rec.total *= inv;
      rec.cross_entropy = rec.total;
      if (!std::isfinite(rec.total)) throw TrainingDiverged("warmup", step);
      opt.step_protos(tree, g_proto, D, proto_cfg);
      opt.step_leaves(tree, g_leaf, leaf_cfg);
      result.history.push_back(rec);
      ++step;
    }
  }

  if (config.joint_epochs > 0) {
    FeatureExtractor& extractor = tree.mutable_extractor();
    auto grads = extractor.make_grads();
    std::vector<AdamState<float>> w_states(extractor.layers().size());
    std::vector<AdamState<float>> b_states(extractor.layers().size());
    const AdamConfig feat_cfg{config.lr_features};
    std::vector<const Sample*> scale_probe;
    const auto probe_batches = make_batches(samples.size(), 400, rng);
    for (std::size_t i : probe_batches.front()) scale_probe.push_back(samples[i]);
    for (int epoch = 0; epoch < config.joint_epochs; ++epoch) {
      for (const auto& batch : make_batches(samples.size(), config.batch_size, rng)) {
        grads.zero();
        std::vector<double> g_proto(n_nodes * D, 0.0);
        auto g_leaf = zero_leaf();
        LossRecord rec{"joint", epoch, step};
        for (std::size_t idx : batch) {
          const int sym = config.augment ? static_cast<int>(rng() % 8) : 0;
          const auto trace = extractor.forward(sym == 0 ? samples[idx]->image
                                                        : dihedral(samples[idx]->image, sym));
          const auto z = to_latent(trace.output());
          auto obj = tree_objective(tree, z, samples[idx]->label, true);
          for (std::size_t k = 0; k < g_proto.size(); ++k) g_proto[k] += obj.grad_prototypes[k];
          accumulate(g_leaf, obj.grad_leaf);
          extractor.backward(trace, latent_grad_to_tensor(obj.grad_latent, z.height, z.width, z.depth), grads);
          rec.total += obj.loss;
        }
        const double inv = 1.0 / static_cast<double>(batch.size());
        for (auto& g : g_proto) g *= inv;
        for (auto& row : g_leaf) for (auto& g : row) g *= inv;
        grads.scale(static_cast<float>(inv));
        rec.total *= inv;
        rec.cross_entropy = rec.total;
        if (!std::isfinite(rec.total)) throw TrainingDiverged("joint", step);
        for (std::size_t l = 0; l < extractor.layers().size(); ++l) {
          w_states[l].update(std::span<float>(extractor.layers()[l].weight), grads.weight[l], feat_cfg);
          b_states[l].update(std::span<float>(extractor.layers()[l].bias), grads.bias[l], feat_cfg);
        }
        opt.step_protos(tree, g_proto, D, proto_cfg);
        opt.step_leaves(tree, g_leaf, leaf_cfg);
        result.history.push_back(rec);
        ++step;
      }
      refit_scale(tree, scale_probe);
    }
  }

  if (gradient_stages) tree = project_prototypes(tree, data);

  if (config.last_layer_epochs > 0) {
    std::vector<LatentMap> final_latents;
    final_latents.reserve(samples.size());
    for (const auto* s : samples) final_latents.push_back(tree.encode(s->image));
    for (int epoch = 0; epoch < config.last_layer_epochs; ++epoch) {
      for (const auto& batch : make_batches(samples.size(), config.batch_size, rng)) {
        auto g_leaf = zero_leaf();
        LossRecord rec{"last_layer", epoch, step};
        for (std::size_t idx : batch) {
          auto obj = tree_objective(tree, final_latents[idx], samples[idx]->label, false);
          accumulate(g_leaf, obj.grad_leaf);
          rec.total += obj.loss;
        }
        const double inv = 1.0 / static_cast<double>(batch.size());
        for (auto& row : g_leaf) for (auto& g : row) g *= inv;
        rec.total *= inv;
        rec.cross_entropy = rec.total;
        if (!std::isfinite(rec.total)) throw TrainingDiverged("last_layer", step);
        opt.step_leaves(tree, g_leaf, leaf_cfg);
        result.history.push_back(rec);
        ++step;
      }
    }
  }
  return result;
}

ProtoTree project_prototypes(const ProtoTree& tree, const Dataset& data) {
  std::vector<ProjectionCandidate> candidates;
  for (const auto& s : data.samples) {
    if (s.split != Split::train) continue;
    candidates.push_back({&s, tree.encode(s.image)});
  }
  ProtoTree out = tree;
  project_onto_patches(out.mutable_prototypes(), candidates, false);
  return out;
}

}  // namespace protolab
