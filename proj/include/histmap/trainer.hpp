#pragma once

#include <cstdio>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "histmap/core.hpp"
#include "histmap/data.hpp"
#include "histmap/eval.hpp"
#include "histmap/histogram_ap.hpp"
#include "histmap/losses.hpp"
#include "histmap/model.hpp"

namespace histmap {

/// Fully-resolved training configuration; every output artifact echoes it.
struct TrainConfig {
  std::size_t p = 16;
  std::size_t k = 4;
  std::size_t epochs = 1;
  std::size_t steps_per_epoch = 200;
  double learning_rate = 3.5e-3;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double margin = 0.3;
  std::size_t m_bins = 40;
  double bin_lo = -1.0;
  double bin_hi = 1.0;
  double tau = 1e-12;
  LossWeights loss_weights;
  std::vector<std::size_t> hidden_widths = {128};
  std::size_t feature_dim = 64;
  std::uint64_t seed = 42;
  std::size_t eval_every = 0;  // 0 = only at the end
  std::size_t max_rank = 20;

  void validate() const {
    if (p < 2 || k < 2) throw InvalidSpec("train config: p and k must be >= 2");
    if (learning_rate <= 0) throw InvalidSpec("train config: learning_rate must be > 0");
    if (momentum < 0 || momentum >= 1)
      throw InvalidSpec("train config: momentum must be in [0, 1)");
    if (weight_decay < 0) throw InvalidSpec("train config: weight_decay must be >= 0");
    if (m_bins < 2) throw InvalidSpec("train config: m_bins must be >= 2");
    if (!(bin_hi > bin_lo)) throw InvalidSpec("train config: bin_hi must exceed bin_lo");
    if (tau <= 0) throw InvalidSpec("train config: tau must be > 0");
    if (feature_dim == 0) throw InvalidSpec("train config: feature_dim must be > 0");
    if (loss_weights.id < 0 || loss_weights.triplet < 0 || loss_weights.map < 0)
      throw InvalidSpec("train config: loss weights must be >= 0");
  }

  std::string echo() const {
    std::ostringstream os;
    os << "p = " << p << "\nk = " << k << "\nepochs = " << epochs
       << "\nsteps_per_epoch = " << steps_per_epoch
       << "\nlearning_rate = " << learning_rate << "\nmomentum = " << momentum
       << "\nweight_decay = " << weight_decay << "\nmargin = " << margin
       << "\nm_bins = " << m_bins << "\nbin_lo = " << bin_lo
       << "\nbin_hi = " << bin_hi << "\ntau = " << tau
       << "\nweight_id = " << loss_weights.id
       << "\nweight_triplet = " << loss_weights.triplet
       << "\nweight_map = " << loss_weights.map << "\nhidden_widths =";
    for (auto w : hidden_widths) os << ' ' << w;
    os << "\nfeature_dim = " << feature_dim << "\nseed = " << seed
       << "\neval_every = " << eval_every << "\nmax_rank = " << max_rank << "\n";
    return os.str();
  }
};

inline std::string format_log_line(std::size_t step, const LossReport& report) {
  char buf[192];
  std::snprintf(buf, sizeof(buf), "%zu\t%.10g\t%.10g\t%.10g\t%.10g\t%zu\n", step,
                report.l_id, report.l_triplet, report.l_map, report.l_total,
                report.active_triplets);
  return buf;
}

struct Trainer {
  TrainConfig config;
  EmbeddingModel model;
  ClassifierHead head;
  SgdOptimizer optimizer;

  Trainer(TrainConfig cfg, std::size_t input_dim, std::size_t num_classes)
      : config(std::move(cfg)) {
    config.validate();
    std::vector<std::size_t> widths;
    widths.push_back(input_dim);
    for (auto w : config.hidden_widths) widths.push_back(w);
    widths.push_back(config.feature_dim);
    model = make_model(widths, config.seed);
    head = ClassifierHead(num_classes, config.feature_dim);
    double bound = std::sqrt(6.0 / static_cast<double>(config.feature_dim + num_classes));
    std::mt19937_64 rng(config.seed ^ 0xC1A551F1EDull);
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& w : head.weights.data) w = dist(rng);
    optimizer = SgdOptimizer{config.learning_rate, config.momentum,
                             config.weight_decay, {}};
  }

  /// One within-batch training step: forward, three losses on the shared
  /// features, combined backward, SGD update. Returns the loss report.
  LossReport step(const LabeledSet& train, const PkBatch& batch) {
    EmbeddingMatrix inputs(batch.indices.size(), train.embeddings.d);
    std::vector<std::uint32_t> labels(batch.indices.size());
    Provenance prov;
    for (std::size_t i = 0; i < batch.indices.size(); ++i) {
      std::copy_n(train.embeddings.row(batch.indices[i]), train.embeddings.d,
                  inputs.row(i));
      labels[i] = train.identity[batch.indices[i]];
      prov.query_sample.push_back(static_cast<std::uint32_t>(batch.indices[i]));
    }
    prov.gallery_sample = prov.query_sample;

    auto [features, cache] = forward(model, inputs);
    const auto& w = config.loss_weights;

    EmbeddingMatrix d_features(features.n, features.d);
    double l_id = 0.0, l_triplet = 0.0, l_map = 0.0;
    std::size_t active = 0;
    ClassifierGrad head_grad;
    head_grad.d_weights = EmbeddingMatrix(head.num_classes, head.weights.d);
    head_grad.d_bias.assign(head.num_classes, 0.0);

    if (w.id > 0) {
      auto ce = cross_entropy_loss(features, labels, head);
      l_id = ce.loss;
      for (std::size_t t = 0; t < d_features.data.size(); ++t)
        d_features.data[t] += w.id * ce.d_features.data[t];
      for (std::size_t t = 0; t < head_grad.d_weights.data.size(); ++t)
        head_grad.d_weights.data[t] = w.id * ce.d_head.d_weights.data[t];
      for (std::size_t t = 0; t < head_grad.d_bias.size(); ++t)
        head_grad.d_bias[t] = w.id * ce.d_head.d_bias[t];
    }
    if (w.triplet > 0) {
      auto tr = batch_hard_triplet_loss(features, labels, config.margin);
      l_triplet = tr.loss;
      active = tr.active_triplets;
      for (std::size_t t = 0; t < d_features.data.size(); ++t)
        d_features.data[t] += w.triplet * tr.d_features.data[t];
    }
    if (w.map > 0) {
      auto norm = normalize_with_backward(features);
      auto sim = cosine_similarity(norm.unit, norm.unit, labels, labels, prov);
      BinGrid grid(config.m_bins, config.bin_lo, config.bin_hi);
      auto [loss, state] = map_loss_forward(sim, grid, config.tau);
      l_map = loss;
      auto d_sim = map_loss_backward(state, sim, grid, config.tau);
      auto [dq, dg] = chain_to_embeddings(d_sim, norm.unit, norm.unit);
      for (std::size_t t = 0; t < dq.data.size(); ++t) dq.data[t] += dg.data[t];
      auto d_feat_map = norm.backward(dq);
      for (std::size_t t = 0; t < d_features.data.size(); ++t)
        d_features.data[t] += w.map * d_feat_map.data[t];
    }

    auto grad = backward(model, cache, d_features);
    sgd_step(optimizer, model, grad, &head, &head_grad);
    return combine_losses(l_id, l_triplet, l_map, w);
  }

  /// Runs the configured number of steps, appending one log line per step.
  /// on_eval (optional) is called after every eval_every steps and at the
  /// end with the current step number.
  void run(const LabeledSet& train, std::string& log,
           const std::function<void(std::size_t)>& on_eval = nullptr) {
    std::size_t step_no = 0;
    const std::size_t total = config.epochs * config.steps_per_epoch;
    for (std::size_t epoch = 0; step_no < total; ++epoch) {
      auto batches = pk_sampler(train, config.p, config.k, config.seed, epoch);
      for (std::size_t b = 0; b < batches.size() && step_no < total; ++b) {
        auto report = step(train, batches[b]);
        ++step_no;
        log += format_log_line(step_no, report);
        if (on_eval && config.eval_every > 0 && step_no % config.eval_every == 0)
          on_eval(step_no);
      }
    }
    if (on_eval) on_eval(step_no);
  }

  /// Embeds a set with the current parameters and L2-normalizes the result.
  EmbeddingMatrix embed(const LabeledSet& set) const {
    auto [features, cache] = forward(model, set.embeddings);
    (void)cache;
    return l2_normalize(features);
  }

  /// Exact retrieval metrics of the current model on a query/gallery pair.
  EvalResult evaluate_split(const LabeledSet& query, const LabeledSet& gallery) const {
    auto q = embed(query);
    auto g = embed(gallery);
    auto sim = cosine_similarity(q, g, query.identity, gallery.identity);
    return evaluate(sim, config.max_rank);
  }
};

/// The default desk-scale synthetic problem: shared identities across
/// train/query/gallery, clothing shift as the planted difficulty.
inline SyntheticSpec default_synthetic_spec(std::uint64_t seed) {
  SyntheticSpec spec;
  spec.num_identities = 32;
  spec.instances_per_identity = 12;
  spec.dim = 64;
  spec.intra_sigma = 0.15;
  spec.inter_scale = 1.0;
  spec.clothing_clusters_per_identity = 2;
  // shift 2x the identity scale: cross-clothing positives start below the
  // top negatives in cosine rank, so retrieval has to learn to ignore the
  // clothing offset rather than inherit it from the inputs
  spec.clothing_shift_sigma = 2.0;
  spec.seed = seed;
  return spec;
}

inline InstanceSplit default_synthetic_splits(std::uint64_t seed) {
  auto set = generate_synthetic(default_synthetic_spec(seed));
  return split_by_instance(set, 8, 2);
}

}  // namespace histmap
