#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include "evtrack/model.hpp"
#include "evtrack/rng.hpp"
#include "evtrack/train.hpp"
#include "oracles.hpp"

namespace oracle {

struct GradCheck {
  double max_rel_error = 0;  // worst per-tensor inf-norm relative error
  std::string worst_tensor;
  bool kink = false;         // finite differences straddled a non-smooth point
  std::size_t checked = 0;
};

// Loss of the model in training mode (batch statistics), as a pure function.
inline double training_loss(const evtrack::BasicModel<double>& m, const evtrack::BasicTensor<double>& x,
                            const evtrack::BasicTensor<double>& t, const evtrack::TrainConfig& cfg) {
  evtrack::ForwardOptions fo;
  fo.training_bn = true;
  const auto out = evtrack::forward(m, x, fo);
  return evtrack::box_loss(out, t, cfg).value;
}

/// Compares analytic gradients with central differences for every trainable
/// element. A second difference at h/2 flags kinks (ReLU, IoU min/max) so the
/// caller can discard the configuration instead of loosening the bound.
inline GradCheck gradient_check(const evtrack::BasicModel<double>& model, const evtrack::BasicTensor<double>& x,
                                const evtrack::BasicTensor<double>& t, const evtrack::TrainConfig& cfg,
                                double h = 1e-3) {
  const auto analytic = evtrack::compute_gradients(model, x, t, cfg).grads;
  evtrack::BasicModel<double> m = model;
  auto f = [&] { return training_loss(m, x, t, cfg); };
  double global = 0;
  for (const auto& [name, g] : analytic)
    for (double v : g.values()) global = std::max(global, std::fabs(v));
  GradCheck r;
  for (const auto& [name, g] : analytic) {
    auto& w = m.param(name);
    double diff = 0, mag = 0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double n1 = central_difference(f, w[i], h);
      const double n2 = central_difference(f, w[i], h / 2);
      if (std::fabs(n1 - n2) > 1e-7 + 1e-5 * std::fabs(n2)) r.kink = true;
      diff = std::max(diff, std::fabs(g[i] - n1));
      mag = std::max({mag, std::fabs(g[i]), std::fabs(n1)});
      ++r.checked;
    }
    const double rel = diff / std::max({mag, 1e-6 * global, 1e-12});
    if (rel > r.max_rel_error) {
      r.max_rel_error = rel;
      r.worst_tensor = name;
    }
  }
  return r;
}

struct TinyProblem {
  evtrack::BasicModel<double> model;
  evtrack::BasicTensor<double> x, t;
};

// Small network touching every layer kind: conv, BN, ReLU, avg-pool, flatten,
// linear and the sigmoid head.
inline TinyProblem random_tiny_problem(std::uint64_t seed) {
  using evtrack::LayerKind;
  evtrack::Rng r(seed);
  const int in_c = 1 + static_cast<int>(r.below(3));
  const int hw = 4 + static_cast<int>(r.below(3));
  const int batch = 2 + static_cast<int>(r.below(2));
  std::vector<evtrack::LayerSpec> layers;
  int size = hw;
  const int convs = 1 + static_cast<int>(r.below(2));
  for (int i = 0; i < convs; ++i) {
    int k = 1 + static_cast<int>(r.below(static_cast<std::uint64_t>(std::min(3, size))));
    // A single weight per output channel is a pure scale that BN cancels.
    if (i == 0 && in_c == 1 && k == 1) k = 2;
    int s = size >= 4 && r.below(2) ? 2 : 1;
    const int p = static_cast<int>(r.below(static_cast<std::uint64_t>(k)));
    if (i == 0 && (size + 2 * p - k) / s + 1 < 2) s = 1;
    const std::string n = std::to_string(i);
    layers.push_back({LayerKind::Conv2d, "conv" + n, 2 + static_cast<int>(r.below(3)), k, s, p, 0});
    size = (size + 2 * p - k) / s + 1;
    // Batch statistics over fewer than 4 values make the output nearly
    // independent of the input, leaving only an epsilon-sized gradient.
    if (batch * size * size >= 4) layers.push_back({LayerKind::BatchNorm, "bn" + n});
    layers.push_back({LayerKind::ReLU, "relu" + n});
  }
  if (size >= 2) {
    layers.push_back({LayerKind::AvgPool, "pool", 0, 2, 2});
  } else {
    layers.push_back({LayerKind::AvgPool, "pool", 0, 1, 1});
  }
  layers.push_back({LayerKind::Flatten, "flatten"});
  layers.push_back({LayerKind::Linear, "fc1", 0, 0, 1, 0, 3 + static_cast<int>(r.below(4))});
  layers.push_back({LayerKind::ReLU, "relu_fc"});
  layers.push_back({LayerKind::Linear, "fc2", 0, 0, 1, 0, 4});
  layers.push_back({LayerKind::Sigmoid, "sigmoid"});

  TinyProblem p;
  p.model = evtrack::make_model<double>(in_c, hw, hw, layers, r.next());
  for (auto& [name, w] : p.model.weights) {
    if (name.ends_with(".gamma"))
      for (auto& v : w.values()) v = r.uniform(0.5, 1.5);
    if (name.ends_with(".beta"))
      for (auto& v : w.values()) v = r.uniform(-0.5, 0.5);
  }
  p.x = evtrack::BasicTensor<double>({batch, in_c, hw, hw});
  for (auto& v : p.x.values()) v = r.uniform(-1, 1);
  p.t = evtrack::BasicTensor<double>({batch, 4});
  for (int n = 0; n < batch; ++n) {
    p.t[static_cast<std::size_t>(n) * 4 + 0] = r.uniform(0.3, 0.7);
    p.t[static_cast<std::size_t>(n) * 4 + 1] = r.uniform(0.3, 0.7);
    p.t[static_cast<std::size_t>(n) * 4 + 2] = r.uniform(0.3, 0.8);
    p.t[static_cast<std::size_t>(n) * 4 + 3] = r.uniform(0.3, 0.8);
  }
  return p;
}

}  // namespace oracle
