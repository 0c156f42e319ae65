#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "evtrack/framer.hpp"
#include "evtrack/model.hpp"

namespace evtrack {

struct TrainConfig {
  double lr = 0.001;
  int batch_size = 32;
  int epochs = 1;
  double iou_weight = 7.5;
  double dist_weight = 1.0;
  int step_size_iters = 500;
  double gamma = 0.1;
  double bn_momentum = 0.1;
  std::uint64_t seed = 0;
};

struct LabeledSample {
  EventFrame frame;
  BBox target;
  std::string participant_id;
  std::uint64_t t_us = 0;
};

/// IoU of two axis-aligned (cx, cy, w, h) boxes; 0 when the union is empty.
double iou(const BBox& a, const BBox& b);

template <typename T>
struct LossResult {
  T value{};
  BasicTensor<T> grad;  // dL/dpred, [N, 4]
};

/// Mean over the batch of iou_weight*(1 - IoU) + dist_weight*||center delta||.
/// pred and target are [N, 4] in (cx, cy, w, h) order.
template <typename T>
LossResult<T> box_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target, const TrainConfig& cfg);

double loss(std::span<const BBox> pred, std::span<const BBox> target, const TrainConfig& cfg);

template <typename T>
BasicTensor<T> boxes_to_tensor(std::span<const BBox> boxes);

template <typename T>
struct StepResult {
  T loss{};
  BasicGradients<T> grads;
  ForwardTrace<T> trace;
};

/// Forward in training mode (BN batch statistics) plus reverse pass through the
/// composite loss. Throws NonFinite naming the first layer with a bad gradient.
template <typename T>
StepResult<T> compute_gradients(const BasicModel<T>& model, const BasicTensor<T>& inputs,
                                const BasicTensor<T>& targets, const TrainConfig& cfg);

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::int64_t step = 0;
  std::map<std::string, std::vector<double>> m, v;
};

/// One bias-corrected Adam update of every trainable tensor present in grads.
void adam_step(Model& model, const Gradients& grads, AdamState& state, double lr);

double lr_schedule(std::int64_t iter, const TrainConfig& cfg);

struct LossPoint {
  std::int64_t iter = 0;
  double lr = 0;
  double loss = 0;
};

struct TrainResult {
  Model model;
  AdamState optimizer;
  std::vector<LossPoint> curve;
};

// Called after each iteration; return false to stop early.
using TrainCallback = std::function<bool(const LossPoint&)>;

/// Seeded shuffle per epoch, fixed batch order, partial final batch kept.
TrainResult train(Model model, std::span<const LabeledSample> dataset, const TrainConfig& cfg,
                  const TrainCallback& callback = {});

// Deterministic sample order for one epoch.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch);

std::string loss_curve_csv(std::span<const LossPoint> curve);

void save_optimizer_state(const AdamState& state, const std::string& path);
AdamState load_optimizer_state(const std::string& path);

}  // namespace evtrack
