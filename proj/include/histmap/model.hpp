#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "histmap/core.hpp"
#include "histmap/errors.hpp"
#include "histmap/losses.hpp"

namespace histmap {

struct AffineLayer {
  EmbeddingMatrix weight;     // out x in
  std::vector<double> bias;   // out
};

/// Small trainable embedding network: a stack of affine layers with ReLU
/// between them (none after the last). The desk-scale stand-in for a
/// convolutional backbone.
struct EmbeddingModel {
  std::vector<AffineLayer> layers;
  std::uint64_t version = 0;  // bumped by every optimizer step

  std::size_t input_dim() const { return layers.front().weight.d; }
  std::size_t output_dim() const { return layers.back().weight.n; }

  std::size_t param_count() const {
    std::size_t c = 0;
    for (const auto& l : layers) c += l.weight.data.size() + l.bias.size();
    return c;
  }

  bool all_finite() const {
    for (const auto& l : layers) {
      if (!l.weight.all_finite()) return false;
      for (double b : l.bias)
        if (!std::isfinite(b)) return false;
    }
    return true;
  }
};

/// Glorot-uniform initialization from a seeded generator. widths lists the
/// full dimension chain: input, hidden..., output.
inline EmbeddingModel make_model(const std::vector<std::size_t>& widths,
                                 std::uint64_t seed) {
  if (widths.size() < 2) throw InvalidSpec("model needs >= 2 widths");
  std::mt19937_64 rng(seed);
  EmbeddingModel model;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    AffineLayer layer;
    layer.weight = EmbeddingMatrix(widths[l + 1], widths[l]);
    layer.bias.assign(widths[l + 1], 0.0);
    double bound = std::sqrt(6.0 / static_cast<double>(widths[l] + widths[l + 1]));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& w : layer.weight.data) w = dist(rng);
    model.layers.push_back(std::move(layer));
  }
  return model;
}

struct ForwardCache {
  EmbeddingMatrix inputs;
  std::vector<EmbeddingMatrix> pre_activations;   // per layer, before ReLU
  std::vector<EmbeddingMatrix> post_activations;  // per layer, after ReLU (last = output)
  std::uint64_t model_version = 0;
};

inline std::pair<EmbeddingMatrix, ForwardCache> forward(
    const EmbeddingModel& model, const EmbeddingMatrix& inputs) {
  if (inputs.d != model.input_dim()) throw DimensionMismatch("model forward");
  ForwardCache cache;
  cache.inputs = inputs;
  cache.model_version = model.version;

  EmbeddingMatrix cur = inputs;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const AffineLayer& layer = model.layers[l];
    EmbeddingMatrix next(cur.n, layer.weight.n);
    for (std::size_t i = 0; i < cur.n; ++i) {
      const double* x = cur.row(i);
      double* y = next.row(i);
      for (std::size_t o = 0; o < layer.weight.n; ++o) {
        double z = layer.bias[o];
        const double* w = layer.weight.row(o);
        for (std::size_t t = 0; t < layer.weight.d; ++t) z += w[t] * x[t];
        y[o] = z;
      }
    }
    cache.pre_activations.push_back(next);
    if (l + 1 < model.layers.size())
      for (double& v : next.data) v = std::max(v, 0.0);
    cache.post_activations.push_back(next);
    cur = std::move(next);
  }
  return {cur, std::move(cache)};
}

struct ModelGrad {
  std::vector<AffineLayer> layers;  // same shapes, gradient values
  EmbeddingMatrix d_inputs;
};

inline ModelGrad backward(const EmbeddingModel& model, const ForwardCache& cache,
                          const EmbeddingMatrix& d_features) {
  if (cache.model_version != model.version) throw StaleCache("model backward");
  if (cache.post_activations.empty() ||
      d_features.n != cache.inputs.n ||
      d_features.d != model.output_dim())
    throw DimensionMismatch("model backward");

  ModelGrad grad;
  grad.layers.resize(model.layers.size());
  EmbeddingMatrix delta = d_features;  // gradient wrt layer output
  for (std::size_t l = model.layers.size(); l-- > 0;) {
    const AffineLayer& layer = model.layers[l];
    const EmbeddingMatrix& input =
        (l == 0) ? cache.inputs : cache.post_activations[l - 1];

    // ReLU backward for hidden layers (none after the last layer); the
    // subgradient at 0 is 0
    if (l + 1 < model.layers.size()) {
      const EmbeddingMatrix& pre = cache.pre_activations[l];
      for (std::size_t t = 0; t < delta.data.size(); ++t)
        if (pre.data[t] <= 0.0) delta.data[t] = 0.0;
    }

    AffineLayer& g = grad.layers[l];
    g.weight = EmbeddingMatrix(layer.weight.n, layer.weight.d);
    g.bias.assign(layer.bias.size(), 0.0);
    EmbeddingMatrix d_in(input.n, input.d);
    for (std::size_t i = 0; i < input.n; ++i) {
      const double* x = input.row(i);
      const double* dy = delta.row(i);
      double* dx = d_in.row(i);
      for (std::size_t o = 0; o < layer.weight.n; ++o) {
        double d = dy[o];
        if (d == 0.0) continue;
        g.bias[o] += d;
        double* dw = g.weight.row(o);
        const double* w = layer.weight.row(o);
        for (std::size_t t = 0; t < layer.weight.d; ++t) {
          dw[t] += d * x[t];
          dx[t] += d * w[t];
        }
      }
    }
    delta = std::move(d_in);
  }
  grad.d_inputs = std::move(delta);
  return grad;
}

/// L2-normalization with an exact backward. The backward maps dL/d(unit)
/// to dL/d(features) via (I/||x|| - x x^T/||x||^3).
struct NormalizeResult {
  EmbeddingMatrix unit;
  std::vector<double> norms;

  EmbeddingMatrix backward(const EmbeddingMatrix& d_unit) const {
    if (d_unit.n != unit.n || d_unit.d != unit.d)
      throw DimensionMismatch("normalize backward");
    EmbeddingMatrix out(unit.n, unit.d);
    for (std::size_t i = 0; i < unit.n; ++i) {
      const double* u = unit.row(i);
      const double* du = d_unit.row(i);
      double* dx = out.row(i);
      double dot = 0.0;
      for (std::size_t t = 0; t < unit.d; ++t) dot += u[t] * du[t];
      for (std::size_t t = 0; t < unit.d; ++t)
        dx[t] = (du[t] - dot * u[t]) / norms[i];
    }
    return out;
  }
};

inline NormalizeResult normalize_with_backward(const EmbeddingMatrix& features) {
  NormalizeResult res;
  res.norms.resize(features.n);
  for (std::size_t i = 0; i < features.n; ++i) {
    res.norms[i] = row_norm(features, i);
    if (res.norms[i] <= 1e-12) throw ZeroNormRow(i);
  }
  res.unit = EmbeddingMatrix(features.n, features.d);
  for (std::size_t i = 0; i < features.n; ++i)
    for (std::size_t t = 0; t < features.d; ++t)
      res.unit.at(i, t) = features.at(i, t) / res.norms[i];
  return res;
}

/// SGD with momentum and weight decay over a flat list of parameter slots.
/// Update rule: v <- mu*v - lr*(g + wd*theta); theta <- theta + v.
struct SgdOptimizer {
  double learning_rate;
  double momentum = 0.0;
  double weight_decay = 0.0;
  std::vector<std::vector<double>> velocity;

  void step(const std::vector<std::span<double>>& params,
            const std::vector<std::span<const double>>& grads) {
    if (params.size() != grads.size()) throw ShapeMismatch("sgd_step");
    if (velocity.empty()) {
      velocity.resize(params.size());
      for (std::size_t s = 0; s < params.size(); ++s)
        velocity[s].assign(params[s].size(), 0.0);
    }
    if (velocity.size() != params.size()) throw ShapeMismatch("sgd_step");
    for (std::size_t s = 0; s < params.size(); ++s) {
      if (params[s].size() != grads[s].size() ||
          params[s].size() != velocity[s].size())
        throw ShapeMismatch("sgd_step");
      for (double g : grads[s])
        if (!std::isfinite(g)) throw NonFiniteGradient("sgd_step");
      for (std::size_t t = 0; t < params[s].size(); ++t) {
        double g = grads[s][t] + weight_decay * params[s][t];
        velocity[s][t] = momentum * velocity[s][t] - learning_rate * g;
        params[s][t] += velocity[s][t];
      }
    }
  }
};

inline std::vector<std::span<double>> model_param_spans(EmbeddingModel& model,
                                                        ClassifierHead* head = nullptr) {
  std::vector<std::span<double>> spans;
  for (auto& l : model.layers) {
    spans.emplace_back(l.weight.data);
    spans.emplace_back(l.bias);
  }
  if (head) {
    spans.emplace_back(head->weights.data);
    spans.emplace_back(head->bias);
  }
  return spans;
}

inline std::vector<std::span<const double>> grad_spans(
    const ModelGrad& grad, const ClassifierGrad* head_grad = nullptr) {
  std::vector<std::span<const double>> spans;
  for (const auto& l : grad.layers) {
    spans.emplace_back(l.weight.data);
    spans.emplace_back(l.bias);
  }
  if (head_grad) {
    spans.emplace_back(head_grad->d_weights.data);
    spans.emplace_back(head_grad->d_bias);
  }
  return spans;
}

/// Applies one optimizer step to model (and optionally head) parameters and
/// bumps the model version so stale caches are detected.
inline void sgd_step(SgdOptimizer& opt, EmbeddingModel& model,
                     const ModelGrad& grad, ClassifierHead* head = nullptr,
                     const ClassifierGrad* head_grad = nullptr) {
  if (grad.layers.size() != model.layers.size()) throw ShapeMismatch("sgd_step");
  auto params = model_param_spans(model, head);
  auto grads = grad_spans(grad, head_grad);
  opt.step(params, grads);
  ++model.version;
  if (!model.all_finite()) throw NonFiniteGradient("sgd_step (parameters)");
}

// ---------------------------------------------------------------------------
// Checkpoint container. Fixed little-endian layout:
//   magic "HMAPCKPT" (8 bytes), format version u32
//   layer count u32, per layer: out u64, in u64
//   per layer payload: weight fp64 row-major, bias fp64
//   head flag u8; if set: C u64, D u64, weights fp64, bias fp64
//   optimizer: lr, momentum, weight_decay fp64; slot count u64,
//              per slot: size u64 + fp64 payload
//   config echo: length u64 + bytes
//   seed u64, model version u64
// ---------------------------------------------------------------------------

struct Checkpoint {
  EmbeddingModel model;
  ClassifierHead head;
  bool has_head = false;
  SgdOptimizer optimizer{0.0};
  std::string config_echo;
  std::uint64_t seed = 0;
};

namespace detail {

inline constexpr char kCkptMagic[8] = {'H', 'M', 'A', 'P', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCkptVersion = 1;

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("unexpected end of checkpoint");
  return v;
}

inline void write_doubles(std::ostream& os, const std::vector<double>& v) {
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(double)));
}

inline void read_doubles(std::istream& is, std::vector<double>& v) {
  is.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(v.size() * sizeof(double)));
  if (!is) throw IoError("unexpected end of checkpoint");
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os.write(detail::kCkptMagic, 8);
  detail::write_pod(os, detail::kCkptVersion);
  detail::write_pod(os, static_cast<std::uint32_t>(ckpt.model.layers.size()));
  for (const auto& l : ckpt.model.layers) {
    detail::write_pod(os, static_cast<std::uint64_t>(l.weight.n));
    detail::write_pod(os, static_cast<std::uint64_t>(l.weight.d));
  }
  for (const auto& l : ckpt.model.layers) {
    detail::write_doubles(os, l.weight.data);
    detail::write_doubles(os, l.bias);
  }
  detail::write_pod(os, static_cast<std::uint8_t>(ckpt.has_head ? 1 : 0));
  if (ckpt.has_head) {
    detail::write_pod(os, static_cast<std::uint64_t>(ckpt.head.num_classes));
    detail::write_pod(os, static_cast<std::uint64_t>(ckpt.head.weights.d));
    detail::write_doubles(os, ckpt.head.weights.data);
    detail::write_doubles(os, ckpt.head.bias);
  }
  detail::write_pod(os, ckpt.optimizer.learning_rate);
  detail::write_pod(os, ckpt.optimizer.momentum);
  detail::write_pod(os, ckpt.optimizer.weight_decay);
  detail::write_pod(os, static_cast<std::uint64_t>(ckpt.optimizer.velocity.size()));
  for (const auto& slot : ckpt.optimizer.velocity) {
    detail::write_pod(os, static_cast<std::uint64_t>(slot.size()));
    detail::write_doubles(os, slot);
  }
  detail::write_pod(os, static_cast<std::uint64_t>(ckpt.config_echo.size()));
  os.write(ckpt.config_echo.data(),
           static_cast<std::streamsize>(ckpt.config_echo.size()));
  detail::write_pod(os, ckpt.seed);
  detail::write_pod(os, ckpt.model.version);
  if (!os) throw IoError("failed writing " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, detail::kCkptMagic, 8) != 0)
    throw IoError(path + " is not a checkpoint file");
  auto version = detail::read_pod<std::uint32_t>(is);
  if (version != detail::kCkptVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version));

  Checkpoint ckpt;
  auto n_layers = detail::read_pod<std::uint32_t>(is);
  std::vector<std::pair<std::uint64_t, std::uint64_t>> shapes(n_layers);
  for (auto& sh : shapes) {
    sh.first = detail::read_pod<std::uint64_t>(is);
    sh.second = detail::read_pod<std::uint64_t>(is);
  }
  for (auto [out, in] : shapes) {
    AffineLayer l;
    l.weight = EmbeddingMatrix(out, in);
    l.bias.assign(out, 0.0);
    detail::read_doubles(is, l.weight.data);
    detail::read_doubles(is, l.bias);
    ckpt.model.layers.push_back(std::move(l));
  }
  ckpt.has_head = detail::read_pod<std::uint8_t>(is) != 0;
  if (ckpt.has_head) {
    auto c = detail::read_pod<std::uint64_t>(is);
    auto d = detail::read_pod<std::uint64_t>(is);
    ckpt.head = ClassifierHead(c, d);
    detail::read_doubles(is, ckpt.head.weights.data);
    detail::read_doubles(is, ckpt.head.bias);
  }
  ckpt.optimizer.learning_rate = detail::read_pod<double>(is);
  ckpt.optimizer.momentum = detail::read_pod<double>(is);
  ckpt.optimizer.weight_decay = detail::read_pod<double>(is);
  auto n_slots = detail::read_pod<std::uint64_t>(is);
  ckpt.optimizer.velocity.resize(n_slots);
  for (auto& slot : ckpt.optimizer.velocity) {
    slot.assign(detail::read_pod<std::uint64_t>(is), 0.0);
    detail::read_doubles(is, slot);
  }
  auto echo_len = detail::read_pod<std::uint64_t>(is);
  ckpt.config_echo.resize(echo_len);
  is.read(ckpt.config_echo.data(), static_cast<std::streamsize>(echo_len));
  ckpt.seed = detail::read_pod<std::uint64_t>(is);
  ckpt.model.version = detail::read_pod<std::uint64_t>(is);
  return ckpt;
}

}  // namespace histmap
