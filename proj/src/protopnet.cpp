#include "protolab/protopnet.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace protolab {

void TrainConfig::validate() const {
  if (warmup_epochs < 0 || joint_epochs < 0 || last_layer_epochs < 0) {
    throw std::invalid_argument("epoch counts must be >= 0");
  }
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  for (double v : {lr_features, lr_prototypes, lr_head, lambda_cluster, lambda_separation, lambda_l1}) {
    if (!std::isfinite(v)) throw std::invalid_argument("training coefficients must be finite");
  }
}

ProtoPNet::ProtoPNet(const ProtoPNetConfig& config, std::uint64_t seed)
    : config_(config), extractor_(config.extractor, seed) {
  config.layer.validate();
  if (config.num_classes < 1) throw std::invalid_argument("num_classes must be >= 1");
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int depth = extractor_.latent_depth();
  for (int c = 0; c < config.num_classes; ++c) {
    for (int k = 0; k < config.layer.per_class_count; ++k) {
      Prototype p;
      p.id = static_cast<int>(prototypes_.size());
      p.class_id = c;
      p.vector.resize(static_cast<std::size_t>(depth));
      for (auto& v : p.vector) v = unit(rng);
      prototypes_.push_back(std::move(p));
    }
  }
  reset_head();
}

void ProtoPNet::reset_head() {
  const std::size_t m = prototypes_.size();
  head_.assign(static_cast<std::size_t>(config_.num_classes) * m, 0.0);
  for (int c = 0; c < config_.num_classes; ++c) {
    for (std::size_t j = 0; j < m; ++j) head_[c * m + j] = prototypes_[j].class_id == c ? 1.0 : -0.5;
  }
}

std::vector<double> ProtoPNet::logits(const PrototypeActivations& act) const {
  const std::size_t m = prototypes_.size();
  std::vector<double> out(static_cast<std::size_t>(config_.num_classes), 0.0);
  for (int c = 0; c < config_.num_classes; ++c) {
    double acc = 0.0;
    for (std::size_t j = 0; j < m; ++j) acc += head_[c * m + j] * act.pooled_similarity[j];
    out[c] = acc;
  }
  return out;
}

std::vector<double> ProtoPNet::class_scores(const LatentMap& z) const { return logits(activations(z)); }

ProtoPNet::Output ProtoPNet::forward(const LatentMap& z) const {
  Output out;
  out.maps.reserve(prototypes_.size());
  for (const auto& p : prototypes_) out.maps.push_back(similarity_map(z, p.vector, epsilon()));
  out.pooled_similarity.reserve(prototypes_.size());
  for (const auto& m : out.maps) out.pooled_similarity.push_back(m.max_score());
  PrototypeActivations act;
  act.pooled_similarity = out.pooled_similarity;
  out.logits = logits(act);
  return out;
}

ProtoPNet::Output ProtoPNet::forward(const Image& image) const { return forward(encode(image)); }

bool ProtoPNet::operator==(const ProtoPNet& other) const {
  return config_.num_classes == other.config_.num_classes && extractor_ == other.extractor_ &&
         prototypes_ == other.prototypes_ && head_ == other.head_;
}

SampleObjective sample_objective(const LatentMap& z, int label, const std::vector<Prototype>& prototypes,
                                 const std::vector<double>& head, int num_classes, double epsilon,
                                 double lambda_cluster, double lambda_separation, bool latent_grad) {
  if (label < 0 || label >= num_classes) throw std::invalid_argument("label out of range");
  const std::size_t m = prototypes.size();
  const int D = z.depth;
  const auto act = activate(z, prototypes, epsilon);

  std::vector<double> logits(static_cast<std::size_t>(num_classes), 0.0);
  for (int c = 0; c < num_classes; ++c) {
    for (std::size_t j = 0; j < m; ++j) logits[c] += head[c * m + j] * act.pooled_similarity[j];
  }
  const double max_logit = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double l : logits) sum += std::exp(l - max_logit);
  const double lse = max_logit + std::log(sum);

  SampleObjective out;
  out.cross_entropy = lse - logits[label];

  std::vector<double> g_logit(static_cast<std::size_t>(num_classes));
  for (int c = 0; c < num_classes; ++c) g_logit[c] = std::exp(logits[c] - lse) - (c == label ? 1.0 : 0.0);

  out.grad_head.assign(static_cast<std::size_t>(num_classes) * m, 0.0);
  std::vector<double> g_dist(m, 0.0);
  for (std::size_t j = 0; j < m; ++j) {
    double g_sim = 0.0;
    for (int c = 0; c < num_classes; ++c) {
      out.grad_head[c * m + j] = g_logit[c] * act.pooled_similarity[j];
      g_sim += head[c * m + j] * g_logit[c];
    }
    g_dist[j] = g_sim * similarity_derivative(act.min_distance[j], epsilon);
  }

  int own = -1, other = -1;
  for (std::size_t j = 0; j < m; ++j) {
    const bool is_own = prototypes[j].class_id == label;
    int& slot = is_own ? own : other;
    if (slot < 0 || act.min_distance[j] < act.min_distance[static_cast<std::size_t>(slot)]) {
      slot = static_cast<int>(j);
    }
  }
  if (own < 0) throw std::invalid_argument("class " + std::to_string(label) + " has no prototypes");
  out.cluster = act.min_distance[static_cast<std::size_t>(own)];
  g_dist[static_cast<std::size_t>(own)] += lambda_cluster;
  if (other >= 0) {
    out.separation = act.min_distance[static_cast<std::size_t>(other)];
    g_dist[static_cast<std::size_t>(other)] -= lambda_separation;
  }
  out.total = out.cross_entropy + lambda_cluster * out.cluster - lambda_separation * out.separation;

  out.grad_prototypes.assign(m * D, 0.0);
  if (latent_grad) out.grad_latent.assign(static_cast<std::size_t>(z.num_patches()) * D, 0.0);
  for (std::size_t j = 0; j < m; ++j) {
    if (g_dist[j] == 0.0) continue;
    const int a = act.argmin[j];
    const auto patch = z.patch(a);
    for (int d = 0; d < D; ++d) {
      const double diff = static_cast<double>(patch[d]) - prototypes[j].vector[d];
      out.grad_prototypes[j * D + d] -= 2.0 * diff * g_dist[j];
      if (latent_grad) out.grad_latent[static_cast<std::size_t>(a) * D + d] += 2.0 * diff * g_dist[j];
    }
  }
  return out;
}

namespace {

std::vector<const Sample*> train_samples(const Dataset& data) {
  std::vector<const Sample*> out;
  for (const auto& s : data.samples) {
    if (s.split == Split::train) out.push_back(&s);
  }
  return out;
}

template <typename T>
std::vector<std::vector<std::size_t>> make_batches(std::size_t n, int batch_size, T& rng) {
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

void check_finite(double loss, const std::string& stage, int step) {
  if (!std::isfinite(loss)) throw TrainingDiverged(stage, step);
}

struct PrototypeOptimizer {
  std::vector<AdamState<double>> states;
  explicit PrototypeOptimizer(std::size_t m) : states(m) {}
  void step(std::vector<Prototype>& protos, const std::vector<double>& grad, int D, const AdamConfig& cfg) {
    for (std::size_t j = 0; j < protos.size(); ++j) {
      states[j].update(protos[j].vector, std::span<const double>(grad.data() + j * D, static_cast<std::size_t>(D)),
                       cfg);
    }
  }
};

}  // namespace

TrainResult train(const TrainConfig& config, const ProtoPNetConfig& model_config, const Dataset& data) {
  return train(config, ProtoPNet(model_config, config.seed), data);
}

TrainResult train(const TrainConfig& config, ProtoPNet initial, const Dataset& data) {
  config.validate();
  TrainResult result{std::move(initial), {}};
  ProtoPNet& model = result.model;
  const auto samples = train_samples(data);
  if (samples.empty()) throw std::invalid_argument("dataset has no training samples");
  for (const auto* s : samples) {
    if (s->label < 0 || s->label >= model.num_classes()) throw std::invalid_argument("label out of range");
  }

  std::mt19937_64 rng(config.seed * 6364136223846793005ULL + 1442695040888963407ULL);
  const int D = model.extractor().latent_depth();
  const std::size_t m = model.prototypes().size();
  const double eps = model.epsilon();
  int step = 0;

  PrototypeOptimizer proto_opt(m);
  const AdamConfig proto_cfg{config.lr_prototypes};

  // warmup: frozen extractor, so latents are computed once
  if (config.warmup_epochs > 0) {
    std::vector<LatentMap> latents;
    latents.reserve(samples.size());
    for (const auto* s : samples) latents.push_back(model.encode(s->image));
    for (int epoch = 0; epoch < config.warmup_epochs; ++epoch) {
      for (const auto& batch : make_batches(samples.size(), config.batch_size, rng)) {
        std::vector<double> g_proto(m * D, 0.0);
        LossRecord rec{"warmup", epoch, step};
        for (std::size_t idx : batch) {
          auto obj = sample_objective(latents[idx], samples[idx]->label, model.prototypes(), model.head(),
                                      model.num_classes(), eps, config.lambda_cluster,
                                      config.lambda_separation, false);
          for (std::size_t k = 0; k < g_proto.size(); ++k) g_proto[k] += obj.grad_prototypes[k];
          rec.total += obj.total;
          rec.cross_entropy += obj.cross_entropy;
          rec.cluster += obj.cluster;
          rec.separation += obj.separation;
        }
        const double inv = 1.0 / static_cast<double>(batch.size());
        for (auto& g : g_proto) g *= inv;
        rec.total *= inv;
        rec.cross_entropy *= inv;
        rec.cluster *= inv;
        rec.separation *= inv;
        check_finite(rec.total, "warmup", step);
        proto_opt.step(model.mutable_prototypes(), g_proto, D, proto_cfg);
        result.history.push_back(rec);
        ++step;
      }
    }
  }

  if (config.joint_epochs > 0) {
    FeatureExtractor& extractor = model.mutable_extractor();
    auto grads = extractor.make_grads();
    std::vector<AdamState<float>> w_states(extractor.layers().size());
    std::vector<AdamState<float>> b_states(extractor.layers().size());
    const AdamConfig feat_cfg{config.lr_features};
    for (int epoch = 0; epoch < config.joint_epochs; ++epoch) {
      for (const auto& batch : make_batches(samples.size(), config.batch_size, rng)) {
        grads.zero();
        std::vector<double> g_proto(m * D, 0.0);
        LossRecord rec{"joint", epoch, step};
        for (std::size_t idx : batch) {
          const int sym = config.augment ? static_cast<int>(rng() % 8) : 0;
          const auto trace = extractor.forward(sym == 0 ? samples[idx]->image
                                                        : dihedral(samples[idx]->image, sym));
          const auto z = to_latent(trace.output());
          auto obj = sample_objective(z, samples[idx]->label, model.prototypes(), model.head(),
                                      model.num_classes(), eps, config.lambda_cluster,
                                      config.lambda_separation, true);
          for (std::size_t k = 0; k < g_proto.size(); ++k) g_proto[k] += obj.grad_prototypes[k];
          extractor.backward(trace, latent_grad_to_tensor(obj.grad_latent, z.height, z.width, z.depth), grads);
          rec.total += obj.total;
          rec.cross_entropy += obj.cross_entropy;
          rec.cluster += obj.cluster;
          rec.separation += obj.separation;
        }
        const double inv = 1.0 / static_cast<double>(batch.size());
        for (auto& g : g_proto) g *= inv;
        grads.scale(static_cast<float>(inv));
        rec.total *= inv;
        rec.cross_entropy *= inv;
        rec.cluster *= inv;
        rec.separation *= inv;
        check_finite(rec.total, "joint", step);
        for (std::size_t l = 0; l < extractor.layers().size(); ++l) {
          w_states[l].update(std::span<float>(extractor.layers()[l].weight), grads.weight[l], feat_cfg);
          b_states[l].update(std::span<float>(extractor.layers()[l].bias), grads.bias[l], feat_cfg);
        }
        proto_opt.step(model.mutable_prototypes(), g_proto, D, proto_cfg);
        result.history.push_back(rec);
        ++step;
      }
    }
  }

  if (config.warmup_epochs + config.joint_epochs > 0) {
    model = project_prototypes(model, data);
  }

  if (config.last_layer_epochs > 0) {
    std::vector<PrototypeActivations> acts;
    acts.reserve(samples.size());
    for (const auto* s : samples) acts.push_back(model.activations(model.encode(s->image)));
    const int C = model.num_classes();
    AdamState<double> head_state;
    const AdamConfig head_cfg{config.lr_head};
    auto& head = model.head();
    for (int epoch = 0; epoch < config.last_layer_epochs; ++epoch) {
      for (const auto& batch : make_batches(samples.size(), config.batch_size, rng)) {
        std::vector<double> g_head(head.size(), 0.0);
        LossRecord rec{"last_layer", epoch, step};
        for (std::size_t idx : batch) {
          const int y = samples[idx]->label;
          const auto logits = model.logits(acts[idx]);
          const double mx = *std::max_element(logits.begin(), logits.end());
          double sum = 0.0;
          for (double l : logits) sum += std::exp(l - mx);
          const double lse = mx + std::log(sum);
          rec.cross_entropy += lse - logits[y];
          for (int c = 0; c < C; ++c) {
            const double g = std::exp(logits[c] - lse) - (c == y ? 1.0 : 0.0);
            for (std::size_t j = 0; j < m; ++j) g_head[c * m + j] += g * acts[idx].pooled_similarity[j];
          }
        }
        const double inv = 1.0 / static_cast<double>(batch.size());
        double l1 = 0.0;
        for (int c = 0; c < C; ++c) {
          for (std::size_t j = 0; j < m; ++j) {
            auto& g = g_head[c * m + j];
            g *= inv;
            if (model.prototypes()[j].class_id != c) {
              const double w = head[c * m + j];
              l1 += std::abs(w);
              g += config.lambda_l1 * (w > 0 ? 1.0 : (w < 0 ? -1.0 : 0.0));
            }
          }
        }
        rec.cross_entropy *= inv;
        rec.total = rec.cross_entropy + config.lambda_l1 * l1;
        check_finite(rec.total, "last_layer", step);
        head_state.update(std::span<double>(head), g_head, head_cfg);
        for (int c = 0; c < C; ++c) {
          for (std::size_t j = 0; j < m; ++j) {
            if (model.prototypes()[j].class_id == c) head[c * m + j] = std::max(0.0, head[c * m + j]);
          }
        }
        result.history.push_back(rec);
        ++step;
      }
    }
  }
  return result;
}

void project_onto_patches(std::vector<Prototype>& prototypes,
                          const std::vector<ProjectionCandidate>& candidates, bool restrict_to_class) {
  for (auto& proto : prototypes) {
    double best = std::numeric_limits<double>::infinity();
    const ProjectionCandidate* best_cand = nullptr;
    int best_patch = 0;
    for (const auto& cand : candidates) {
      if (restrict_to_class && cand.sample->label != proto.class_id) continue;
      const auto grid = squared_l2_map(cand.latent, proto.vector);
      for (std::size_t p = 0; p < grid.values.size(); ++p) {
        if (grid.values[p] < best) {
          best = grid.values[p];
          best_cand = &cand;
          best_patch = static_cast<int>(p);
        }
      }
    }
    if (!best_cand) {
      throw std::invalid_argument("no training images available to project prototype " +
                                  std::to_string(proto.id) + " (class " + std::to_string(proto.class_id) + ")");
    }
    const auto patch = best_cand->latent.patch(best_patch);
    proto.vector.assign(patch.begin(), patch.end());
    proto.source = PrototypeSource{best_cand->sample->id, best_patch / best_cand->latent.width,
                                   best_patch % best_cand->latent.width};
  }
}

ProtoPNet project_prototypes(const ProtoPNet& model, const Dataset& data) {
  std::vector<ProjectionCandidate> candidates;
  for (const auto& s : data.samples) {
    if (s.split != Split::train) continue;
    candidates.push_back({&s, model.encode(s.image)});
  }
  ProtoPNet out = model;
  project_onto_patches(out.mutable_prototypes(), candidates, true);
  return out;
}

double accuracy(const PrototypeModel& model, const Dataset& data) {
  if (data.samples.empty()) return 0.0;
  int correct = 0;
  for (const auto& s : data.samples) correct += model.predict(s.image) == s.label ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(data.samples.size());
}

}  // namespace protolab
