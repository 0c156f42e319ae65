#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "evtrack/framer.hpp"
#include "evtrack/kernels.hpp"
#include "evtrack/model.hpp"

namespace evtrack {

/// Affine int8 parameters: real = (q - zero_point) * scale. One scale for
/// per-tensor parameters, one per output channel otherwise.
struct QuantParams {
  std::vector<double> scale{1.0};
  int zero_point = 0;
  int qmin = -128;
  int qmax = 127;
  bool symmetric = false;
  bool reduce_range = false;

  bool per_channel() const { return scale.size() > 1; }
  friend bool operator==(const QuantParams&, const QuantParams&) = default;
};

struct QuantOptions {
  bool reduce_range = false;

  friend bool operator==(const QuantOptions&, const QuantOptions&) = default;
};

inline int quant_min(bool reduce_range) { return reduce_range ? -64 : -128; }
inline int quant_max(bool reduce_range) { return reduce_range ? 63 : 127; }

// Round half to even, as used when quantizing real values.
double round_half_even(double x);

/// Folds every inference-mode BatchNorm into the convolution before it.
Model fold_batchnorm(const Model& model);

/// Asymmetric per-tensor parameters from an observed range; the range is
/// widened to include zero, and a degenerate range falls back to scale 1/255.
QuantParams activation_params(double min, double max, const QuantOptions& options = {});

// Symmetric per-output-channel parameters; all-zero channels get scale 1.
QuantParams weight_params(const Tensor& weight, const QuantOptions& options = {});

std::int8_t quantize_value(double x, const QuantParams& qp, std::size_t channel = 0);
double dequantize_value(int q, const QuantParams& qp, std::size_t channel = 0);

// Channel of element i is i / (size / channels) for per-channel params.
std::vector<std::int8_t> quantize_tensor(std::span<const float> x, const QuantParams& qp);
std::vector<float> dequantize(std::span<const std::int8_t> q, const QuantParams& qp);

/// A point in the folded float graph whose output is quantized.
struct Boundary {
  std::string name;      // name of the layer producing it, or "input"
  std::size_t layer = 0; // output of folded layer index `layer`; input uses SIZE_MAX
  double min = 0;
  double max = 0;
  QuantParams params;
};

inline constexpr std::size_t kInputBoundary = static_cast<std::size_t>(-1);

/// Indices in the folded model after which activations are quantized:
/// conv/linear (or the ReLU fused onto them) and avg-pool outputs.
std::vector<Boundary> quantization_boundaries(const Model& folded);

/// MinMax calibration over the given frames (batched through the float graph).
std::vector<Boundary> calibrate(const Model& folded, std::span<const EventFrame> frames,
                                const QuantOptions& options = {});

std::string calibration_csv(std::span<const Boundary> boundaries);
std::vector<Boundary> parse_calibration_csv(const Model& folded, const std::string& text,
                                            const QuantOptions& options = {});

enum class QOpKind { Conv, Linear, AvgPool, Flatten };

struct QOp {
  QOpKind kind = QOpKind::Conv;
  std::string name;
  bool relu = false;
  ConvGeometry conv;   // Conv
  PoolGeometry pool;   // AvgPool
  int in_features = 0, out_features = 0;  // Linear
  std::vector<std::int8_t> weight;  // Conv/Linear, OIHW / OI
  std::vector<std::int32_t> bias;   // scale = input_scale * weight_scale[c]
  QuantParams weight_params;
  QuantParams output;               // activation params after this op
  // Requantization: real multiplier per output channel as (int32, shift).
  std::vector<std::int32_t> multiplier;
  std::vector<int> shift;
  Shape out_shape;  // per sample

  friend bool operator==(const QOp&, const QOp&) = default;
};

struct QuantizedModel {
  int in_channels = 2;
  int in_height = kFrameSize;
  int in_width = kFrameSize;
  QuantOptions options;
  QuantParams input;
  std::vector<QOp> ops;

  friend bool operator==(const QuantizedModel&, const QuantizedModel&) = default;
};

/// Symmetric per-channel weights, int32 bias, per-tensor activations from the
/// calibration table, and fixed-point requantization multipliers.
QuantizedModel quantize_model(const Model& folded, std::span<const Boundary> calibration,
                              const QuantOptions& options = {});

/// Splits a positive real multiplier into a Q31 integer and a power-of-two exponent
/// so that real ~= multiplier * 2^(shift - 31).
void quantize_multiplier(double real, std::int32_t& multiplier, int& shift);

/// round_half_away(acc * multiplier * 2^(shift-31)), computed exactly in 64 bits.
std::int32_t multiply_by_quantized_multiplier(std::int32_t acc, std::int32_t multiplier, int shift);

/// Integer activations at every boundary, input first.
struct QuantizedTrace {
  std::vector<std::vector<std::int8_t>> tensors;
};

// Pure-integer inference; the final sigmoid runs on dequantized logits.
std::array<float, 4> quantized_forward(const QuantizedModel& qmodel, const EventFrame& frame,
                                       QuantizedTrace* trace = nullptr, MacCounter* macs = nullptr,
                                       KernelPath path = KernelPath::Fast);

/// Runs one op on an integer input. Exposed for layer-by-layer verification.
std::vector<std::int8_t> run_qop(const QOp& op, const QuantParams& in_params,
                                 std::span<const std::int8_t> input, MacCounter* macs = nullptr,
                                 KernelPath path = KernelPath::Fast);

std::vector<std::uint8_t> serialize_qmodel(const QuantizedModel& qmodel);
QuantizedModel deserialize_qmodel(std::span<const std::uint8_t> bytes);
void save_qmodel(const QuantizedModel& qmodel, const std::string& path);
QuantizedModel load_qmodel(const std::string& path);

}  // namespace evtrack
