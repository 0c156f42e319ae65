#include "evtrack/quant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "evtrack/bytes.hpp"
#include "evtrack/container.hpp"
#include "evtrack/error.hpp"

namespace evtrack {

double round_half_even(double x) {
  const double f = std::floor(x);
  const double d = x - f;
  if (d > 0.5) return f + 1;
  if (d < 0.5) return f;
  return std::fmod(f, 2.0) == 0 ? f : f + 1;
}

namespace {

bool is_followed_by(const Model& m, std::size_t i, LayerKind kind) {
  return i + 1 < m.layers.size() && m.layers[i + 1].kind == kind;
}

int clamp_int(double v, int lo, int hi) {
  if (v < lo) return lo;
  if (v > hi) return hi;
  return static_cast<int>(v);
}

}  // namespace

Model fold_batchnorm(const Model& model) {
  layer_shapes(model);
  Model out;
  out.in_channels = model.in_channels;
  out.in_height = model.in_height;
  out.in_width = model.in_width;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const LayerSpec& l = model.layers[i];
    if (l.kind == LayerKind::BatchNorm)
      throw Error(ErrorCode::StructureMismatch, "batchnorm '" + l.name + "' does not follow a conv");
    out.layers.push_back(l);
    if (l.kind != LayerKind::Conv2d && l.kind != LayerKind::Linear) continue;
    Tensor w = model.param(l.name + ".weight");
    Tensor b = model.param(l.name + ".bias");
    if (l.kind == LayerKind::Conv2d && is_followed_by(model, i, LayerKind::BatchNorm)) {
      const std::string& bn = model.layers[i + 1].name;
      const Tensor& gamma = model.param(bn + ".gamma");
      const Tensor& beta = model.param(bn + ".beta");
      const Tensor& mean = model.param(bn + ".running_mean");
      const Tensor& var = model.param(bn + ".running_var");
      const int oc = w.dim(0);
      const std::size_t per = w.size() / static_cast<std::size_t>(oc);
      for (int c = 0; c < oc; ++c) {
        const double k = static_cast<double>(gamma[c]) / std::sqrt(static_cast<double>(var[c]) + kBatchNormEpsilon);
        for (std::size_t j = 0; j < per; ++j) {
          float& v = w[static_cast<std::size_t>(c) * per + j];
          v = static_cast<float>(v * k);
        }
        b[c] = static_cast<float>((static_cast<double>(b[c]) - mean[c]) * k + beta[c]);
      }
      ++i;
    }
    out.weights[l.name + ".weight"] = std::move(w);
    out.weights[l.name + ".bias"] = std::move(b);
  }
  layer_shapes(out);
  return out;
}

QuantParams activation_params(double min, double max, const QuantOptions& options) {
  if (!std::isfinite(min) || !std::isfinite(max) || min > max)
    throw Error(ErrorCode::NonFinite, "invalid activation range");
  QuantParams qp;
  qp.qmin = quant_min(options.reduce_range);
  qp.qmax = quant_max(options.reduce_range);
  qp.reduce_range = options.reduce_range;
  min = std::min(min, 0.0);
  max = std::max(max, 0.0);
  const double levels = qp.qmax - qp.qmin;
  if (max - min <= 0) {
    qp.scale = {1.0 / 255.0};
    qp.zero_point = qp.qmin;
    return qp;
  }
  const double scale = (max - min) / levels;
  qp.scale = {scale};
  qp.zero_point = clamp_int(round_half_even(qp.qmin - min / scale), qp.qmin, qp.qmax);
  return qp;
}

QuantParams weight_params(const Tensor& weight, const QuantOptions& options) {
  if (weight.shape().empty() || weight.dim(0) == 0)
    throw Error(ErrorCode::ShapeMismatch, "weight tensor has no output channels");
  QuantParams qp;
  qp.symmetric = true;
  qp.reduce_range = options.reduce_range;
  qp.qmin = quant_min(options.reduce_range);
  qp.qmax = quant_max(options.reduce_range);
  const int oc = weight.dim(0);
  const std::size_t per = weight.size() / static_cast<std::size_t>(oc);
  qp.scale.assign(static_cast<std::size_t>(oc), 1.0);
  for (int c = 0; c < oc; ++c) {
    double m = 0;
    for (std::size_t j = 0; j < per; ++j)
      m = std::max(m, std::fabs(static_cast<double>(weight[static_cast<std::size_t>(c) * per + j])));
    if (m > 0) qp.scale[static_cast<std::size_t>(c)] = m / qp.qmax;
  }
  return qp;
}

std::int8_t quantize_value(double x, const QuantParams& qp, std::size_t channel) {
  const double q = round_half_even(x / qp.scale[channel]) + qp.zero_point;
  return static_cast<std::int8_t>(clamp_int(q, qp.qmin, qp.qmax));
}

double dequantize_value(int q, const QuantParams& qp, std::size_t channel) {
  return (q - qp.zero_point) * qp.scale[channel];
}

std::vector<std::int8_t> quantize_tensor(std::span<const float> x, const QuantParams& qp) {
  std::vector<std::int8_t> q(x.size());
  const std::size_t per = qp.per_channel() ? x.size() / qp.scale.size() : x.size();
  for (std::size_t i = 0; i < x.size(); ++i) q[i] = quantize_value(x[i], qp, qp.per_channel() ? i / per : 0);
  return q;
}

std::vector<float> dequantize(std::span<const std::int8_t> q, const QuantParams& qp) {
  std::vector<float> x(q.size());
  const std::size_t per = qp.per_channel() ? q.size() / qp.scale.size() : q.size();
  for (std::size_t i = 0; i < q.size(); ++i)
    x[i] = static_cast<float>(dequantize_value(q[i], qp, qp.per_channel() ? i / per : 0));
  return x;
}

std::vector<Boundary> quantization_boundaries(const Model& folded) {
  layer_shapes(folded);
  std::vector<Boundary> out;
  out.push_back({"input", kInputBoundary, 0, 0, {}});
  const auto& L = folded.layers;
  for (std::size_t i = 0; i < L.size(); ++i) {
    switch (L[i].kind) {
      case LayerKind::Conv2d:
      case LayerKind::Linear:
        if (is_followed_by(folded, i, LayerKind::ReLU)) {
          out.push_back({L[i].name, i + 1, 0, 0, {}});
          ++i;
        } else {
          out.push_back({L[i].name, i, 0, 0, {}});
        }
        break;
      case LayerKind::AvgPool:
        out.push_back({L[i].name, i, 0, 0, {}});
        break;
      case LayerKind::Flatten:
        break;
      case LayerKind::Sigmoid:
        if (i + 1 != L.size()) throw Error(ErrorCode::StructureMismatch, "sigmoid must be the last layer");
        break;
      case LayerKind::ReLU:
        throw Error(ErrorCode::StructureMismatch, "relu '" + L[i].name + "' is not fused onto a conv or linear");
      case LayerKind::BatchNorm:
        throw Error(ErrorCode::StructureMismatch, "model is not folded");
    }
  }
  return out;
}

std::vector<Boundary> calibrate(const Model& folded, std::span<const EventFrame> frames,
                                const QuantOptions& options) {
  if (frames.empty()) throw Error(ErrorCode::EmptyInput, "calibration needs at least one frame");
  std::vector<Boundary> bounds = quantization_boundaries(folded);
  for (auto& b : bounds) {
    b.min = std::numeric_limits<double>::infinity();
    b.max = -std::numeric_limits<double>::infinity();
  }
  constexpr std::size_t kBatch = 32;
  for (std::size_t start = 0; start < frames.size(); start += kBatch) {
    std::vector<const EventFrame*> batch;
    for (std::size_t i = start; i < std::min(frames.size(), start + kBatch); ++i) batch.push_back(&frames[i]);
    ForwardTrace<float> trace;
    forward(folded, frames_to_batch(batch), {}, &trace);
    for (auto& b : bounds) {
      const Tensor& t = b.layer == kInputBoundary ? trace.inputs[0] : trace.inputs[b.layer + 1];
      for (float v : t.values()) {
        b.min = std::min(b.min, static_cast<double>(v));
        b.max = std::max(b.max, static_cast<double>(v));
      }
    }
  }
  for (auto& b : bounds) b.params = activation_params(b.min, b.max, options);
  return bounds;
}

std::string calibration_csv(std::span<const Boundary> boundaries) {
  std::ostringstream s;
  s << "tensor,min,max,scale,zero_point\n";
  for (const auto& b : boundaries)
    s << b.name << ',' << format_double(b.min) << ',' << format_double(b.max) << ','
      << format_double(b.params.scale[0]) << ',' << b.params.zero_point << '\n';
  return s.str();
}

std::vector<Boundary> parse_calibration_csv(const Model& folded, const std::string& text,
                                            const QuantOptions& options) {
  std::vector<Boundary> bounds = quantization_boundaries(folded);
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("tensor,min,max", 0) != 0)
    throw Error(ErrorCode::ParseError, "calibration table has no header");
  std::size_t i = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    if (f.size() < 3) throw Error(ErrorCode::ParseError, "bad calibration row: " + line);
    if (i >= bounds.size() || bounds[i].name != f[0])
      throw Error(ErrorCode::MissingParams, "calibration table does not match the model at '" + f[0] + "'");
    bounds[i].min = parse_double(f[1]);
    bounds[i].max = parse_double(f[2]);
    bounds[i].params = activation_params(bounds[i].min, bounds[i].max, options);
    ++i;
  }
  if (i != bounds.size()) throw Error(ErrorCode::MissingParams, "calibration table is missing boundaries");
  return bounds;
}

void quantize_multiplier(double real, std::int32_t& multiplier, int& shift) {
  if (!(real > 0) || !std::isfinite(real)) {
    multiplier = 0;
    shift = 0;
    return;
  }
  int exp = 0;
  const double m = std::frexp(real, &exp);
  auto q = static_cast<std::int64_t>(std::llround(m * 2147483648.0));
  if (q == (std::int64_t{1} << 31)) {
    q /= 2;
    ++exp;
  }
  multiplier = static_cast<std::int32_t>(q);
  shift = exp;
}

std::int32_t multiply_by_quantized_multiplier(std::int32_t acc, std::int32_t multiplier, int shift) {
  const std::int64_t prod = static_cast<std::int64_t>(acc) * multiplier;
  const int right = 31 - shift;
  std::int64_t r;
  if (right <= 0) {
    const int left = -right;
    if (left >= 32 || (prod != 0 && std::llabs(prod) > (std::numeric_limits<std::int64_t>::max() >> left)))
      r = prod > 0 ? std::numeric_limits<std::int32_t>::max()
                   : (prod < 0 ? std::numeric_limits<std::int32_t>::min() : 0);
    else
      r = prod * (std::int64_t{1} << left);
  } else if (right > 62) {
    r = 0;
  } else {
    const std::int64_t mag = prod < 0 ? -prod : prod;
    const std::int64_t rounded = (mag + (std::int64_t{1} << (right - 1))) >> right;
    r = prod < 0 ? -rounded : rounded;
  }
  r = std::clamp<std::int64_t>(r, std::numeric_limits<std::int32_t>::min(), std::numeric_limits<std::int32_t>::max());
  return static_cast<std::int32_t>(r);
}

QuantizedModel quantize_model(const Model& folded, std::span<const Boundary> calibration,
                              const QuantOptions& options) {
  const std::vector<Boundary> expected = quantization_boundaries(folded);
  if (calibration.size() != expected.size())
    throw Error(ErrorCode::MissingParams, "calibration does not cover every quantization boundary");
  for (std::size_t i = 0; i < expected.size(); ++i)
    if (calibration[i].name != expected[i].name || calibration[i].layer != expected[i].layer)
      throw Error(ErrorCode::MissingParams, "missing calibration for '" + expected[i].name + "'");
  const std::vector<Shape> shapes = layer_shapes(folded);

  QuantizedModel q;
  q.in_channels = folded.in_channels;
  q.in_height = folded.in_height;
  q.in_width = folded.in_width;
  q.options = options;
  q.input = calibration[0].params;
  QuantParams current = q.input;
  std::size_t next_boundary = 1;
  const auto& L = folded.layers;
  for (std::size_t i = 0; i < L.size(); ++i) {
    const LayerSpec& l = L[i];
    QOp op;
    op.name = l.name;
    switch (l.kind) {
      case LayerKind::Conv2d:
      case LayerKind::Linear: {
        const Shape& in = shapes[i];
        const Tensor& w = folded.param(l.name + ".weight");
        const Tensor& b = folded.param(l.name + ".bias");
        if (l.kind == LayerKind::Conv2d) {
          op.kind = QOpKind::Conv;
          op.conv = {in[0], in[1], in[2], l.out_channels, l.kernel, l.stride, l.padding};
        } else {
          op.kind = QOpKind::Linear;
          op.in_features = in[0];
          op.out_features = l.units;
        }
        op.relu = is_followed_by(folded, i, LayerKind::ReLU);
        op.weight_params = weight_params(w, options);
        op.weight = quantize_tensor(w.span(), op.weight_params);
        op.output = calibration[next_boundary++].params;
        const std::size_t oc = op.weight_params.scale.size();
        op.bias.resize(oc);
        op.multiplier.resize(oc);
        op.shift.resize(oc);
        for (std::size_t c = 0; c < oc; ++c) {
          const double bias_scale = current.scale[0] * op.weight_params.scale[c];
          const double qb = round_half_even(b[c] / bias_scale);
          op.bias[c] = static_cast<std::int32_t>(std::clamp<double>(qb, std::numeric_limits<std::int32_t>::min(),
                                                                    std::numeric_limits<std::int32_t>::max()));
          quantize_multiplier(bias_scale / op.output.scale[0], op.multiplier[c], op.shift[c]);
        }
        if (op.relu) ++i;
        op.out_shape = shapes[i + 1];
        break;
      }
      case LayerKind::AvgPool: {
        const Shape& in = shapes[i];
        op.kind = QOpKind::AvgPool;
        op.pool = {in[0], in[1], in[2], l.kernel, l.stride};
        op.output = calibration[next_boundary++].params;
        op.multiplier.resize(1);
        op.shift.resize(1);
        quantize_multiplier(current.scale[0] / (l.kernel * l.kernel * op.output.scale[0]), op.multiplier[0],
                            op.shift[0]);
        op.out_shape = shapes[i + 1];
        break;
      }
      case LayerKind::Flatten:
        op.kind = QOpKind::Flatten;
        op.output = current;
        op.out_shape = shapes[i + 1];
        break;
      case LayerKind::Sigmoid:
        continue;
      default:
        throw Error(ErrorCode::StructureMismatch, "unexpected layer '" + l.name + "' in folded model");
    }
    current = op.output;
    q.ops.push_back(std::move(op));
  }
  return q;
}

namespace {

std::int8_t requantize(std::int32_t acc, std::int32_t multiplier, int shift, int zp, int lo, int hi) {
  const std::int64_t v = static_cast<std::int64_t>(multiply_by_quantized_multiplier(acc, multiplier, shift)) + zp;
  return static_cast<std::int8_t>(std::clamp<std::int64_t>(v, lo, hi));
}

void check_input_size(const QOp& op, std::size_t n) {
  std::size_t expected = 0;
  switch (op.kind) {
    case QOpKind::Conv:
      expected = static_cast<std::size_t>(op.conv.in_c) * op.conv.in_h * op.conv.in_w;
      break;
    case QOpKind::Linear:
      expected = static_cast<std::size_t>(op.in_features);
      break;
    case QOpKind::AvgPool:
      expected = static_cast<std::size_t>(op.pool.channels) * op.pool.in_h * op.pool.in_w;
      break;
    case QOpKind::Flatten:
      expected = shape_size(op.out_shape);
      break;
  }
  if (n != expected) throw Error(ErrorCode::ShapeMismatch, "op '" + op.name + "' got " + std::to_string(n) + " inputs");
}

// Accumulators for conv: acc[co][p] = bias[co] + sum (x - zp_in) * w.
std::vector<std::int32_t> conv_acc_ref(const QOp& op, const std::int32_t* x, MacCounter* macs) {
  const ConvGeometry& g = op.conv;
  const int oh = g.out_h(), ow = g.out_w();
  std::vector<std::int32_t> acc(static_cast<std::size_t>(g.out_c) * oh * ow);
  for (int co = 0; co < g.out_c; ++co)
    for (int y = 0; y < oh; ++y)
      for (int xo = 0; xo < ow; ++xo) {
        std::int32_t s = op.bias[static_cast<std::size_t>(co)];
        for (int ci = 0; ci < g.in_c; ++ci)
          for (int ky = 0; ky < g.kernel; ++ky)
            for (int kx = 0; kx < g.kernel; ++kx) {
              const int iy = y * g.stride - g.pad + ky;
              const int ix = xo * g.stride - g.pad + kx;
              if (iy < 0 || iy >= g.in_h || ix < 0 || ix >= g.in_w) continue;
              s += x[(static_cast<std::size_t>(ci) * g.in_h + iy) * g.in_w + ix] *
                   op.weight[((static_cast<std::size_t>(co) * g.in_c + ci) * g.kernel + ky) * g.kernel + kx];
            }
        acc[(static_cast<std::size_t>(co) * oh + y) * ow + xo] = s;
      }
  if (macs) macs->macs += static_cast<std::uint64_t>(g.out_c) * oh * ow * g.patch();
  return acc;
}

std::vector<std::int32_t> conv_acc_fast(const QOp& op, const std::int32_t* x) {
  const ConvGeometry& g = op.conv;
  const int plane = g.out_h() * g.out_w();
  std::vector<std::int32_t> col(static_cast<std::size_t>(g.patch()) * plane);
  fast::im2col(x, col.data(), g);
  std::vector<std::int32_t> w(op.weight.begin(), op.weight.end());
  std::vector<std::int32_t> acc(static_cast<std::size_t>(g.out_c) * plane);
  for (int co = 0; co < g.out_c; ++co)
    std::fill_n(acc.begin() + static_cast<std::ptrdiff_t>(co) * plane, plane, op.bias[static_cast<std::size_t>(co)]);
  fast::gemm(w.data(), col.data(), acc.data(), g.out_c, g.patch(), plane, true);
  return acc;
}

}  // namespace

std::vector<std::int8_t> run_qop(const QOp& op, const QuantParams& in_params, std::span<const std::int8_t> input,
                                 MacCounter* macs, KernelPath path) {
  check_input_size(op, input.size());
  if (op.kind == QOpKind::Flatten) return {input.begin(), input.end()};

  std::vector<std::int32_t> x(input.size());
  for (std::size_t i = 0; i < input.size(); ++i) x[i] = input[i] - in_params.zero_point;
  const int zp = op.output.zero_point;
  const int hi = op.output.qmax;
  const int lo = op.relu ? std::max(zp, op.output.qmin) : op.output.qmin;
  const bool reference = path == KernelPath::Reference || macs != nullptr;

  std::vector<std::int8_t> out;
  switch (op.kind) {
    case QOpKind::Conv: {
      const std::vector<std::int32_t> acc = reference ? conv_acc_ref(op, x.data(), macs) : conv_acc_fast(op, x.data());
      const std::size_t plane = static_cast<std::size_t>(op.conv.out_h()) * op.conv.out_w();
      out.resize(acc.size());
      for (std::size_t i = 0; i < acc.size(); ++i) {
        const std::size_t c = i / plane;
        out[i] = requantize(acc[i], op.multiplier[c], op.shift[c], zp, lo, hi);
      }
      break;
    }
    case QOpKind::Linear: {
      out.resize(static_cast<std::size_t>(op.out_features));
      for (int o = 0; o < op.out_features; ++o) {
        std::int32_t s = op.bias[static_cast<std::size_t>(o)];
        const std::int8_t* w = op.weight.data() + static_cast<std::size_t>(o) * op.in_features;
        for (int k = 0; k < op.in_features; ++k) s += x[static_cast<std::size_t>(k)] * w[k];
        out[static_cast<std::size_t>(o)] = requantize(s, op.multiplier[static_cast<std::size_t>(o)],
                                                      op.shift[static_cast<std::size_t>(o)], zp, lo, hi);
      }
      if (macs) macs->macs += static_cast<std::uint64_t>(op.in_features) * op.out_features;
      break;
    }
    case QOpKind::AvgPool: {
      const PoolGeometry& g = op.pool;
      const int oh = g.out_h(), ow = g.out_w();
      out.resize(static_cast<std::size_t>(g.channels) * oh * ow);
      for (int c = 0; c < g.channels; ++c)
        for (int y = 0; y < oh; ++y)
          for (int xo = 0; xo < ow; ++xo) {
            std::int32_t s = 0;
            for (int ky = 0; ky < g.kernel; ++ky)
              for (int kx = 0; kx < g.kernel; ++kx)
                s += x[(static_cast<std::size_t>(c) * g.in_h + y * g.stride + ky) * g.in_w + xo * g.stride + kx];
            out[(static_cast<std::size_t>(c) * oh + y) * ow + xo] =
                requantize(s, op.multiplier[0], op.shift[0], zp, lo, hi);
          }
      break;
    }
    case QOpKind::Flatten:
      break;
  }
  return out;
}

std::array<float, 4> quantized_forward(const QuantizedModel& qmodel, const EventFrame& frame, QuantizedTrace* trace,
                                       MacCounter* macs, KernelPath path) {
  const std::size_t expected = static_cast<std::size_t>(qmodel.in_channels) * qmodel.in_height * qmodel.in_width;
  if (frame.data.size() != expected || frame.channels != qmodel.in_channels)
    throw Error(ErrorCode::ShapeMismatch, "frame does not match the quantized model input");
  if (qmodel.ops.empty()) throw Error(ErrorCode::StructureMismatch, "quantized model has no ops");
  std::vector<std::int8_t> cur = quantize_tensor(frame.data, qmodel.input);
  if (trace) trace->tensors.assign(1, cur);
  const QuantParams* params = &qmodel.input;
  for (const QOp& op : qmodel.ops) {
    cur = run_qop(op, *params, cur, macs, path);
    params = &op.output;
    if (trace && op.kind != QOpKind::Flatten) trace->tensors.push_back(cur);
  }
  if (cur.size() != 4) throw Error(ErrorCode::ShapeMismatch, "quantized model does not end in 4 outputs");
  std::array<float, 4> out{};
  for (std::size_t i = 0; i < 4; ++i) {
    const double logit = dequantize_value(cur[i], *params);
    out[i] = static_cast<float>(1.0 / (1.0 + std::exp(-logit)));
  }
  return out;
}

namespace {

std::string describe_params(const QuantParams& qp) {
  std::ostringstream s;
  s << "zp=" << qp.zero_point << " qmin=" << qp.qmin << " qmax=" << qp.qmax << " sym=" << qp.symmetric
    << " rr=" << qp.reduce_range << " n=" << qp.scale.size();
  for (double v : qp.scale) s << ' ' << format_double(v);
  return s.str();
}

QuantParams parse_params(const std::vector<std::string>& tok, std::size_t from) {
  if (tok.size() < from + 6) throw Error(ErrorCode::StructureMismatch, "truncated qparams line");
  QuantParams qp;
  qp.zero_point = parse_int(expect_kv(tok[from], "zp"));
  qp.qmin = parse_int(expect_kv(tok[from + 1], "qmin"));
  qp.qmax = parse_int(expect_kv(tok[from + 2], "qmax"));
  qp.symmetric = parse_int(expect_kv(tok[from + 3], "sym")) != 0;
  qp.reduce_range = parse_int(expect_kv(tok[from + 4], "rr")) != 0;
  const int n = parse_int(expect_kv(tok[from + 5], "n"));
  if (n < 1 || tok.size() != from + 6 + static_cast<std::size_t>(n))
    throw Error(ErrorCode::StructureMismatch, "qparams scale count does not match");
  qp.scale.clear();
  for (int i = 0; i < n; ++i) {
    const double s = parse_double(tok[from + 6 + static_cast<std::size_t>(i)]);
    if (!(s > 0)) throw Error(ErrorCode::StructureMismatch, "non-positive scale");
    qp.scale.push_back(s);
  }
  if (qp.symmetric && qp.zero_point != 0) throw Error(ErrorCode::StructureMismatch, "symmetric params with zero point");
  return qp;
}

const char* qop_kind_name(QOpKind k) {
  switch (k) {
    case QOpKind::Conv: return "conv";
    case QOpKind::Linear: return "linear";
    case QOpKind::AvgPool: return "avgpool";
    case QOpKind::Flatten: return "flatten";
  }
  return "?";
}

void derive_requant(QOp& op, const QuantParams& in) {
  if (op.kind == QOpKind::Conv || op.kind == QOpKind::Linear) {
    const std::size_t oc = op.weight_params.scale.size();
    op.multiplier.resize(oc);
    op.shift.resize(oc);
    for (std::size_t c = 0; c < oc; ++c)
      quantize_multiplier(in.scale[0] * op.weight_params.scale[c] / op.output.scale[0], op.multiplier[c], op.shift[c]);
  } else if (op.kind == QOpKind::AvgPool) {
    op.multiplier.resize(1);
    op.shift.resize(1);
    quantize_multiplier(in.scale[0] / (op.pool.kernel * op.pool.kernel * op.output.scale[0]), op.multiplier[0],
                        op.shift[0]);
  }
}

}  // namespace

std::vector<std::uint8_t> serialize_qmodel(const QuantizedModel& q) {
  std::ostringstream m;
  std::vector<std::uint8_t> blob;
  m << "quantized true\n";
  m << "input " << q.in_channels << ' ' << q.in_height << ' ' << q.in_width << '\n';
  m << "reduce_range " << q.options.reduce_range << '\n';
  m << "qinput " << describe_params(q.input) << '\n';
  m << "ops " << q.ops.size() << '\n';
  for (const QOp& op : q.ops) {
    m << "op " << qop_kind_name(op.kind) << ' ' << op.name;
    switch (op.kind) {
      case QOpKind::Conv: {
        const ConvGeometry& g = op.conv;
        m << " relu=" << op.relu << " in=" << g.in_c << ',' << g.in_h << ',' << g.in_w << " out=" << g.out_c
          << " k=" << g.kernel << " s=" << g.stride << " p=" << g.pad << '\n';
        break;
      }
      case QOpKind::Linear:
        m << " relu=" << op.relu << " in=" << op.in_features << " out=" << op.out_features << '\n';
        break;
      case QOpKind::AvgPool:
        m << " in=" << op.pool.channels << ',' << op.pool.in_h << ',' << op.pool.in_w << " k=" << op.pool.kernel
          << " s=" << op.pool.stride << '\n';
        break;
      case QOpKind::Flatten:
        m << " n=" << shape_size(op.out_shape) << '\n';
        break;
    }
    if (op.kind == QOpKind::Conv || op.kind == QOpKind::Linear) {
      m << "qweight " << describe_params(op.weight_params) << '\n';
      m << "tensor i8 " << op.weight.size() << '\n';
      for (std::int8_t v : op.weight) put_u8(blob, static_cast<std::uint8_t>(v));
      m << "tensor i32 " << op.bias.size() << '\n';
      for (std::int32_t v : op.bias) put_u32(blob, static_cast<std::uint32_t>(v));
    }
    if (op.kind != QOpKind::Flatten) m << "qout " << describe_params(op.output) << '\n';
  }
  return seal_container(m.str(), blob);
}

QuantizedModel deserialize_qmodel(std::span<const std::uint8_t> bytes) {
  const OpenedContainer c = open_container(bytes);
  std::size_t li = 0;
  auto next = [&](const std::string& key, std::size_t min_tokens) {
    if (li >= c.lines.size()) throw Error(ErrorCode::StructureMismatch, "manifest ends early");
    auto tok = split_tokens(c.lines[li++]);
    if (tok.size() < min_tokens || tok[0] != key) throw Error(ErrorCode::StructureMismatch, "expected '" + key + "' line");
    return tok;
  };
  ByteReader blob(c.blob);

  auto tok = next("quantized", 2);
  if (tok[1] != "true") throw Error(ErrorCode::StructureMismatch, "container holds a float model");
  QuantizedModel q;
  tok = next("input", 4);
  q.in_channels = parse_int(tok[1]);
  q.in_height = parse_int(tok[2]);
  q.in_width = parse_int(tok[3]);
  q.options.reduce_range = parse_int(next("reduce_range", 2)[1]) != 0;
  q.input = parse_params(next("qinput", 1), 1);
  const int n_ops = parse_int(next("ops", 2)[1]);
  Shape shape{q.in_channels, q.in_height, q.in_width};
  QuantParams in = q.input;
  for (int i = 0; i < n_ops; ++i) {
    tok = next("op", 3);
    QOp op;
    op.name = tok[2];
    auto triple = [](const std::string& s) {
      std::vector<int> v;
      std::stringstream ss(s);
      for (std::string part; std::getline(ss, part, ',');) v.push_back(parse_int(part));
      if (v.size() != 3) throw Error(ErrorCode::StructureMismatch, "expected C,H,W");
      return v;
    };
    if (tok[1] == "conv") {
      if (tok.size() != 9) throw Error(ErrorCode::StructureMismatch, "bad conv op line");
      op.kind = QOpKind::Conv;
      op.relu = parse_int(expect_kv(tok[3], "relu")) != 0;
      const auto d = triple(expect_kv(tok[4], "in"));
      op.conv = {d[0], d[1], d[2], parse_int(expect_kv(tok[5], "out")), parse_int(expect_kv(tok[6], "k")),
                 parse_int(expect_kv(tok[7], "s")), parse_int(expect_kv(tok[8], "p"))};
      op.out_shape = {op.conv.out_c, op.conv.out_h(), op.conv.out_w()};
    } else if (tok[1] == "linear") {
      if (tok.size() != 6) throw Error(ErrorCode::StructureMismatch, "bad linear op line");
      op.kind = QOpKind::Linear;
      op.relu = parse_int(expect_kv(tok[3], "relu")) != 0;
      op.in_features = parse_int(expect_kv(tok[4], "in"));
      op.out_features = parse_int(expect_kv(tok[5], "out"));
      op.out_shape = {op.out_features};
    } else if (tok[1] == "avgpool") {
      if (tok.size() != 6) throw Error(ErrorCode::StructureMismatch, "bad avgpool op line");
      op.kind = QOpKind::AvgPool;
      const auto d = triple(expect_kv(tok[3], "in"));
      op.pool = {d[0], d[1], d[2], parse_int(expect_kv(tok[4], "k")), parse_int(expect_kv(tok[5], "s"))};
      op.out_shape = {op.pool.channels, op.pool.out_h(), op.pool.out_w()};
    } else if (tok[1] == "flatten") {
      if (tok.size() != 4) throw Error(ErrorCode::StructureMismatch, "bad flatten op line");
      op.kind = QOpKind::Flatten;
      op.out_shape = {parse_int(expect_kv(tok[3], "n"))};
    } else {
      throw Error(ErrorCode::StructureMismatch, "unknown op kind '" + tok[1] + "'");
    }
    if (op.kind != QOpKind::Flatten) {
      const Shape in_shape = op.kind == QOpKind::Conv      ? Shape{op.conv.in_c, op.conv.in_h, op.conv.in_w}
                             : op.kind == QOpKind::AvgPool ? Shape{op.pool.channels, op.pool.in_h, op.pool.in_w}
                                                           : Shape{op.in_features};
      if (shape_size(in_shape) != shape_size(shape))
        throw Error(ErrorCode::StructureMismatch, "op '" + op.name + "' input does not match the previous op");
    } else if (shape_size(op.out_shape) != shape_size(shape)) {
      throw Error(ErrorCode::StructureMismatch, "flatten size does not match");
    }
    try {
      if (op.kind == QOpKind::Conv || op.kind == QOpKind::Linear) {
        op.weight_params = parse_params(next("qweight", 1), 1);
        const std::size_t oc = op.kind == QOpKind::Conv ? static_cast<std::size_t>(op.conv.out_c)
                                                        : static_cast<std::size_t>(op.out_features);
        const std::size_t fan = op.kind == QOpKind::Conv ? static_cast<std::size_t>(op.conv.patch())
                                                         : static_cast<std::size_t>(op.in_features);
        if (op.weight_params.scale.size() != oc) throw Error(ErrorCode::StructureMismatch, "weight scale count");
        tok = next("tensor", 3);
        if (tok[1] != "i8" || static_cast<std::size_t>(parse_int(tok[2])) != oc * fan)
          throw Error(ErrorCode::StructureMismatch, "bad weight tensor for '" + op.name + "'");
        op.weight.resize(oc * fan);
        for (auto& v : op.weight) v = static_cast<std::int8_t>(blob.u8());
        tok = next("tensor", 3);
        if (tok[1] != "i32" || static_cast<std::size_t>(parse_int(tok[2])) != oc)
          throw Error(ErrorCode::StructureMismatch, "bad bias tensor for '" + op.name + "'");
        op.bias.resize(oc);
        for (auto& v : op.bias) v = static_cast<std::int32_t>(blob.u32());
      }
    } catch (const Error& e) {
      if (e.code() == ErrorCode::Truncated) throw Error(ErrorCode::StructureMismatch, "blob shorter than manifest");
      throw;
    }
    op.output = op.kind == QOpKind::Flatten ? in : parse_params(next("qout", 1), 1);
    derive_requant(op, in);
    shape = op.out_shape;
    in = op.output;
    q.ops.push_back(std::move(op));
  }
  if (li != c.lines.size() || blob.remaining() != 0)
    throw Error(ErrorCode::StructureMismatch, "trailing manifest lines or blob bytes");
  return q;
}

void save_qmodel(const QuantizedModel& qmodel, const std::string& path) {
  write_file(path, serialize_qmodel(qmodel));
}

QuantizedModel load_qmodel(const std::string& path) { return deserialize_qmodel(read_file(path)); }

}  // namespace evtrack
