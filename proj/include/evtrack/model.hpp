#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "evtrack/framer.hpp"
#include "evtrack/kernels.hpp"
#include "evtrack/tensor.hpp"

namespace evtrack {

enum class LayerKind { Conv2d, BatchNorm, ReLU, AvgPool, Flatten, Linear, Sigmoid };

const char* layer_kind_name(LayerKind kind);

struct LayerSpec {
  LayerKind kind = LayerKind::ReLU;
  std::string name;
  int out_channels = 0;  // Conv2d
  int kernel = 0;        // Conv2d, AvgPool
  int stride = 1;        // Conv2d, AvgPool
  int padding = 0;       // Conv2d
  int units = 0;         // Linear

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

inline constexpr double kBatchNormEpsilon = 1e-5;

/// Architecture plus named parameters. Per layer `name`:
///   Conv2d/Linear: name.weight, name.bias
///   BatchNorm:     name.gamma, name.beta, name.running_mean, name.running_var
template <typename T>
struct BasicModel {
  int in_channels = 2;
  int in_height = kFrameSize;
  int in_width = kFrameSize;
  std::vector<LayerSpec> layers;
  std::map<std::string, BasicTensor<T>> weights;

  const BasicTensor<T>& param(const std::string& key) const;
  BasicTensor<T>& param(const std::string& key);

  template <typename U>
  BasicModel<U> cast() const {
    BasicModel<U> out;
    out.in_channels = in_channels;
    out.in_height = in_height;
    out.in_width = in_width;
    out.layers = layers;
    for (const auto& [k, v] : weights) out.weights.emplace(k, v.template cast<U>());
    return out;
  }

  friend bool operator==(const BasicModel&, const BasicModel&) = default;
};

using Model = BasicModel<float>;

/// Normalized pupil box.
struct BBox {
  double cx = 0, cy = 0, w = 0, h = 0;
};

struct Decoded {
  BBox box;
  double px = 0;
  double py = 0;
};

// Per-sample activation shape after each layer; shapes[0] is the input.
// Validates layer compatibility and parameter shapes.
template <typename T>
std::vector<Shape> layer_shapes(const BasicModel<T>& model);

/// The eye-tracking CNN: six conv blocks, pooled, and a two-layer head.
Model build_default_model(int in_channels, std::uint64_t seed);

// Fan-in uniform init (bound 1/sqrt(fan_in)) for every conv/linear layer;
// BN gamma=1, beta=0, running stats (0, 1).
template <typename T>
void init_weights(BasicModel<T>& model, std::uint64_t seed);

/// Builds and initializes a model from a layer list.
template <typename T>
BasicModel<T> make_model(int in_channels, int height, int width, std::vector<LayerSpec> layers,
                         std::uint64_t seed);

enum class KernelPath { Fast, Reference };

struct ForwardOptions {
  bool training_bn = false;  // BN uses batch statistics
  KernelPath path = KernelPath::Fast;
  MacCounter* macs = nullptr;  // forces the reference path
#ifdef NDEBUG
  bool check_finite = false;
#else
  bool check_finite = true;
#endif
};

template <typename T>
struct BatchNormStats {
  std::vector<T> mean, var, inv_std;
  BasicTensor<T> x_hat;
  bool training = false;
};

/// Everything backward needs from a forward pass.
template <typename T>
struct ForwardTrace {
  std::vector<BasicTensor<T>> inputs;  // inputs[i] feeds layer i; back() is the output
  std::map<std::size_t, BatchNormStats<T>> bn;
};

/// Batched forward over [N, C, H, W]; returns [N, 4] after the sigmoid head.
template <typename T>
BasicTensor<T> forward(const BasicModel<T>& model, const BasicTensor<T>& input,
                       const ForwardOptions& options = {}, ForwardTrace<T>* trace = nullptr);

using Gradients = std::map<std::string, Tensor>;

template <typename T>
using BasicGradients = std::map<std::string, BasicTensor<T>>;

/// Reverse pass from dL/d(output). Gradients cover trainable parameters only.
template <typename T>
BasicGradients<T> backward(const BasicModel<T>& model, const ForwardTrace<T>& trace,
                           const BasicTensor<T>& d_output);

/// Stacks square frames into [N,C,S,S]; S is inferred from the data size.
Tensor frames_to_batch(const std::vector<const EventFrame*>& frames);
Tensor frame_to_batch(const EventFrame& frame);

std::array<float, 4> predict(const Model& model, const EventFrame& frame);

Decoded decode_output(std::span<const float> values, int grid = kFrameSize);
Decoded decode_output(const BBox& box, int grid = kFrameSize);

// Trainable parameters: conv/linear weight+bias, BN gamma+beta.
template <typename T>
std::uint64_t count_params(const BasicModel<T>& model);

// Sum over conv/linear of output elements x fan-in, per sample.
template <typename T>
std::uint64_t count_macs(const BasicModel<T>& model);

// MACs counted by running the reference kernels on one zero input.
std::uint64_t count_macs_instrumented(const Model& model);

bool is_trainable(const std::string& weight_name);

std::vector<std::uint8_t> serialize_model(const Model& model);
Model deserialize_model(std::span<const std::uint8_t> bytes);
void save_model(const Model& model, const std::string& path);
Model load_model(const std::string& path);

}  // namespace evtrack

namespace evtrack {

// Manifest line for one layer ("conv2d conv1 out=16 k=5 s=2 p=1") and back.
std::string describe_layer(const LayerSpec& layer);
LayerSpec parse_layer(const std::vector<std::string>& tokens);

}  // namespace evtrack
