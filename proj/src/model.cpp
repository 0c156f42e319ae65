#include "evtrack/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "evtrack/bytes.hpp"
#include "evtrack/container.hpp"
#include "evtrack/error.hpp"
#include "evtrack/rng.hpp"

namespace evtrack {

std::string shape_string(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::ReLU: return "relu";
    case LayerKind::AvgPool: return "avgpool";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::Linear: return "linear";
    case LayerKind::Sigmoid: return "sigmoid";
  }
  return "?";
}

template <typename T>
const BasicTensor<T>& BasicModel<T>::param(const std::string& key) const {
  auto it = weights.find(key);
  if (it == weights.end()) throw Error(ErrorCode::StructureMismatch, "missing tensor " + key);
  return it->second;
}

template <typename T>
BasicTensor<T>& BasicModel<T>::param(const std::string& key) {
  auto it = weights.find(key);
  if (it == weights.end()) throw Error(ErrorCode::StructureMismatch, "missing tensor " + key);
  return it->second;
}

namespace {

// Expected parameter shapes of one layer given its per-sample input shape.
std::vector<std::pair<std::string, Shape>> param_shapes(const LayerSpec& l, const Shape& in) {
  switch (l.kind) {
    case LayerKind::Conv2d:
      return {{l.name + ".weight", {l.out_channels, in[0], l.kernel, l.kernel}},
              {l.name + ".bias", {l.out_channels}}};
    case LayerKind::BatchNorm:
      return {{l.name + ".gamma", {in[0]}},
              {l.name + ".beta", {in[0]}},
              {l.name + ".running_mean", {in[0]}},
              {l.name + ".running_var", {in[0]}}};
    case LayerKind::Linear:
      return {{l.name + ".weight", {l.units, in[0]}}, {l.name + ".bias", {l.units}}};
    default:
      return {};
  }
}

Shape next_shape(const LayerSpec& l, const Shape& in) {
  auto need_rank = [&](std::size_t r) {
    if (in.size() != r)
      throw Error(ErrorCode::ShapeMismatch,
                  "layer " + l.name + " expects rank " + std::to_string(r) + " input, got " + shape_string(in));
  };
  switch (l.kind) {
    case LayerKind::Conv2d: {
      need_rank(3);
      if (l.out_channels <= 0 || l.kernel <= 0 || l.stride <= 0 || l.padding < 0 || l.padding >= l.kernel)
        throw Error(ErrorCode::StructureMismatch, "bad conv parameters in " + l.name);
      const int oh = (in[1] + 2 * l.padding - l.kernel) / l.stride + 1;
      const int ow = (in[2] + 2 * l.padding - l.kernel) / l.stride + 1;
      if (in[1] + 2 * l.padding < l.kernel || in[2] + 2 * l.padding < l.kernel)
        throw Error(ErrorCode::ShapeMismatch, "conv " + l.name + " kernel larger than input");
      return {l.out_channels, oh, ow};
    }
    case LayerKind::BatchNorm:
      need_rank(3);
      return in;
    case LayerKind::ReLU:
    case LayerKind::Sigmoid:
      return in;
    case LayerKind::AvgPool: {
      need_rank(3);
      if (l.kernel <= 0 || l.stride <= 0 || in[1] < l.kernel || in[2] < l.kernel)
        throw Error(ErrorCode::ShapeMismatch, "bad pool parameters in " + l.name);
      return {in[0], (in[1] - l.kernel) / l.stride + 1, (in[2] - l.kernel) / l.stride + 1};
    }
    case LayerKind::Flatten:
      return {static_cast<int>(shape_size(in))};
    case LayerKind::Linear:
      need_rank(1);
      if (l.units <= 0) throw Error(ErrorCode::StructureMismatch, "bad linear units in " + l.name);
      return {l.units};
  }
  return in;
}

template <typename T>
std::vector<Shape> infer_shapes(const BasicModel<T>& model, bool check_weights) {
  if (model.in_channels <= 0 || model.in_height <= 0 || model.in_width <= 0)
    throw Error(ErrorCode::StructureMismatch, "bad input shape");
  std::vector<Shape> shapes{{model.in_channels, model.in_height, model.in_width}};
  std::size_t expected_tensors = 0;
  for (const auto& l : model.layers) {
    const Shape& in = shapes.back();
    Shape out = next_shape(l, in);
    if (check_weights) {
      for (const auto& [key, shape] : param_shapes(l, in)) {
        const auto& t = model.param(key);
        if (t.shape() != shape)
          throw Error(ErrorCode::ShapeMismatch,
                      key + " has shape " + shape_string(t.shape()) + ", expected " + shape_string(shape));
        ++expected_tensors;
      }
    }
    shapes.push_back(std::move(out));
  }
  if (check_weights && expected_tensors != model.weights.size())
    throw Error(ErrorCode::StructureMismatch, "model carries tensors not referenced by any layer");
  return shapes;
}

template <typename T>
void check_finite(const BasicTensor<T>& t, const std::string& where) {
  for (const T v : t.values())
    if (!std::isfinite(v)) throw Error(ErrorCode::NonFinite, "non-finite activation after " + where);
}

ConvGeometry conv_geometry(const LayerSpec& l, const Shape& in) {
  ConvGeometry g;
  g.in_c = in[0];
  g.in_h = in[1];
  g.in_w = in[2];
  g.out_c = l.out_channels;
  g.kernel = l.kernel;
  g.stride = l.stride;
  g.pad = l.padding;
  return g;
}

PoolGeometry pool_geometry(const LayerSpec& l, const Shape& in) {
  PoolGeometry g;
  g.channels = in[0];
  g.in_h = in[1];
  g.in_w = in[2];
  g.kernel = l.kernel;
  g.stride = l.stride;
  return g;
}

Shape with_batch(int n, const Shape& s) {
  Shape out{n};
  out.insert(out.end(), s.begin(), s.end());
  return out;
}

}  // namespace

template <typename T>
std::vector<Shape> layer_shapes(const BasicModel<T>& model) {
  return infer_shapes(model, true);
}

template <typename T>
void init_weights(BasicModel<T>& model, std::uint64_t seed) {
  const auto shapes = infer_shapes(model, false);
  Rng rng(seed);
  model.weights.clear();
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const auto& l = model.layers[i];
    const Shape& in = shapes[i];
    const auto ps = param_shapes(l, in);
    if (l.kind == LayerKind::Conv2d || l.kind == LayerKind::Linear) {
      const int fan_in = l.kind == LayerKind::Conv2d ? in[0] * l.kernel * l.kernel : in[0];
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (const auto& [key, shape] : ps) {
        BasicTensor<T> t(shape);
        for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-bound, bound));
        model.weights[key] = std::move(t);
      }
    } else if (l.kind == LayerKind::BatchNorm) {
      model.weights[l.name + ".gamma"] = BasicTensor<T>({in[0]}, T{1});
      model.weights[l.name + ".beta"] = BasicTensor<T>({in[0]}, T{0});
      model.weights[l.name + ".running_mean"] = BasicTensor<T>({in[0]}, T{0});
      model.weights[l.name + ".running_var"] = BasicTensor<T>({in[0]}, T{1});
    }
  }
}

template <typename T>
BasicModel<T> make_model(int in_channels, int height, int width, std::vector<LayerSpec> layers,
                         std::uint64_t seed) {
  BasicModel<T> m;
  m.in_channels = in_channels;
  m.in_height = height;
  m.in_width = width;
  m.layers = std::move(layers);
  init_weights(m, seed);
  return m;
}

Model build_default_model(int in_channels, std::uint64_t seed) {
  if (in_channels != 1 && in_channels != 2)
    throw Error(ErrorCode::InvalidArgument, "in_channels must be 1 or 2");
  std::vector<LayerSpec> layers;
  auto conv_block = [&](int idx, int out, int k, int s, int p) {
    const std::string n = std::to_string(idx);
    layers.push_back({LayerKind::Conv2d, "conv" + n, out, k, s, p, 0});
    layers.push_back({LayerKind::BatchNorm, "bn" + n});
    layers.push_back({LayerKind::ReLU, "relu" + n});
  };
  auto pool = [&](int idx) { layers.push_back({LayerKind::AvgPool, "pool" + std::to_string(idx), 0, 2, 2}); };

  conv_block(1, 16, 5, 2, 1);
  conv_block(2, 64, 3, 1, 1);
  conv_block(3, 16, 3, 1, 1);
  conv_block(4, 16, 3, 1, 1);
  pool(4);
  conv_block(5, 8, 3, 1, 1);
  pool(5);
  conv_block(6, 16, 3, 1, 1);
  pool(6);
  layers.push_back({LayerKind::Flatten, "flatten"});
  layers.push_back({LayerKind::Linear, "fc1", 0, 0, 1, 0, 128});
  layers.push_back({LayerKind::ReLU, "relu_fc1"});
  layers.push_back({LayerKind::Linear, "fc2", 0, 0, 1, 0, 4});
  layers.push_back({LayerKind::Sigmoid, "sigmoid"});
  return make_model<float>(in_channels, kFrameSize, kFrameSize, std::move(layers), seed);
}

template <typename T>
BasicTensor<T> forward(const BasicModel<T>& model, const BasicTensor<T>& input,
                       const ForwardOptions& options, ForwardTrace<T>* trace) {
  const auto shapes = layer_shapes(model);
  if (input.rank() != 4 || input.dim(1) != model.in_channels || input.dim(2) != model.in_height ||
      input.dim(3) != model.in_width)
    throw Error(ErrorCode::ShapeMismatch, "input " + shape_string(input.shape()) + " does not match model input " +
                                              shape_string(shapes.front()));
  const int batch = input.dim(0);
  const bool reference = options.path == KernelPath::Reference || options.macs != nullptr;

  if (trace) {
    trace->inputs.clear();
    trace->bn.clear();
    trace->inputs.reserve(model.layers.size() + 1);
  }
  BasicTensor<T> cur = input;
  for (std::size_t li = 0; li < model.layers.size(); ++li) {
    const auto& l = model.layers[li];
    const Shape& in = shapes[li];
    const Shape& out_shape = shapes[li + 1];
    BasicTensor<T> out(with_batch(batch, out_shape));
    switch (l.kind) {
      case LayerKind::Conv2d: {
        const auto g = conv_geometry(l, in);
        const auto& w = model.param(l.name + ".weight");
        const auto& b = model.param(l.name + ".bias");
        if (reference)
          ref::conv2d(cur.data(), w.data(), b.data(), out.data(), batch, g, options.macs);
        else
          fast::conv2d_forward(cur.data(), w.data(), b.data(), out.data(), batch, g);
        break;
      }
      case LayerKind::BatchNorm: {
        const int c_n = in[0];
        const std::size_t plane = static_cast<std::size_t>(in[1]) * in[2];
        const auto& gamma = model.param(l.name + ".gamma");
        const auto& beta = model.param(l.name + ".beta");
        BatchNormStats<T> st;
        st.training = options.training_bn;
        st.mean.resize(c_n);
        st.var.resize(c_n);
        st.inv_std.resize(c_n);
        if (options.training_bn) {
          const double count = static_cast<double>(batch) * plane;
          for (int c = 0; c < c_n; ++c) {
            double s = 0, s2 = 0;
            for (int n = 0; n < batch; ++n) {
              const T* p = cur.data() + (static_cast<std::size_t>(n) * c_n + c) * plane;
              for (std::size_t i = 0; i < plane; ++i) s += p[i];
            }
            const double mean = s / count;
            for (int n = 0; n < batch; ++n) {
              const T* p = cur.data() + (static_cast<std::size_t>(n) * c_n + c) * plane;
              for (std::size_t i = 0; i < plane; ++i) s2 += (p[i] - mean) * (p[i] - mean);
            }
            st.mean[c] = static_cast<T>(mean);
            st.var[c] = static_cast<T>(s2 / count);
          }
        } else {
          const auto& rm = model.param(l.name + ".running_mean");
          const auto& rv = model.param(l.name + ".running_var");
          for (int c = 0; c < c_n; ++c) {
            st.mean[c] = rm[c];
            st.var[c] = rv[c];
          }
        }
        for (int c = 0; c < c_n; ++c)
          st.inv_std[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(st.var[c]) + kBatchNormEpsilon));
        if (trace) st.x_hat = BasicTensor<T>(cur.shape());
        for (int n = 0; n < batch; ++n)
          for (int c = 0; c < c_n; ++c) {
            const std::size_t base = (static_cast<std::size_t>(n) * c_n + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              const T xh = (cur[base + i] - st.mean[c]) * st.inv_std[c];
              if (trace) st.x_hat[base + i] = xh;
              out[base + i] = gamma[c] * xh + beta[c];
            }
          }
        if (trace) trace->bn.emplace(li, std::move(st));
        break;
      }
      case LayerKind::ReLU:
        for (std::size_t i = 0; i < cur.size(); ++i) out[i] = cur[i] > T{0} ? cur[i] : T{0};
        break;
      case LayerKind::Sigmoid:
        for (std::size_t i = 0; i < cur.size(); ++i) out[i] = T{1} / (T{1} + std::exp(-cur[i]));
        break;
      case LayerKind::AvgPool: {
        const auto g = pool_geometry(l, in);
        if (reference)
          ref::avgpool2d(cur.data(), out.data(), batch, g);
        else
          fast::avgpool2d_forward(cur.data(), out.data(), batch, g);
        break;
      }
      case LayerKind::Flatten:
        out.values() = cur.values();
        break;
      case LayerKind::Linear: {
        const auto& w = model.param(l.name + ".weight");
        const auto& b = model.param(l.name + ".bias");
        if (reference)
          ref::linear(cur.data(), w.data(), b.data(), out.data(), batch, in[0], l.units, options.macs);
        else
          fast::linear_forward(cur.data(), w.data(), b.data(), out.data(), batch, in[0], l.units);
        break;
      }
    }
    if (options.check_finite) check_finite(out, l.name);
    if (trace) trace->inputs.push_back(std::move(cur));
    cur = std::move(out);
  }
  if (trace) trace->inputs.push_back(cur);
  return cur;
}

template <typename T>
BasicGradients<T> backward(const BasicModel<T>& model, const ForwardTrace<T>& trace,
                           const BasicTensor<T>& d_output) {
  const auto shapes = layer_shapes(model);
  if (trace.inputs.size() != model.layers.size() + 1)
    throw Error(ErrorCode::StructureMismatch, "trace does not match model");
  const int batch = trace.inputs.front().dim(0);
  if (d_output.shape() != trace.inputs.back().shape())
    throw Error(ErrorCode::ShapeMismatch, "output gradient shape mismatch");

  BasicGradients<T> grads;
  BasicTensor<T> d = d_output;
  for (std::size_t li = model.layers.size(); li-- > 0;) {
    const auto& l = model.layers[li];
    const Shape& in = shapes[li];
    const auto& x = trace.inputs[li];
    const auto& y = trace.inputs[li + 1];
    const bool need_dx = li > 0;
    BasicTensor<T> dx;
    if (need_dx) dx = BasicTensor<T>(x.shape());
    switch (l.kind) {
      case LayerKind::Conv2d: {
        const auto g = conv_geometry(l, in);
        const auto& w = model.param(l.name + ".weight");
        BasicTensor<T> dw(w.shape()), db({l.out_channels});
        fast::conv2d_backward(x.data(), w.data(), d.data(), need_dx ? dx.data() : nullptr, dw.data(), db.data(),
                              batch, g);
        grads[l.name + ".weight"] = std::move(dw);
        grads[l.name + ".bias"] = std::move(db);
        break;
      }
      case LayerKind::BatchNorm: {
        const auto& st = trace.bn.at(li);
        const int c_n = in[0];
        const std::size_t plane = static_cast<std::size_t>(in[1]) * in[2];
        const auto& gamma = model.param(l.name + ".gamma");
        BasicTensor<T> dgamma({c_n}), dbeta({c_n});
        const double count = static_cast<double>(batch) * plane;
        for (int c = 0; c < c_n; ++c) {
          double sum_dy = 0, sum_dy_xh = 0;
          for (int n = 0; n < batch; ++n) {
            const std::size_t base = (static_cast<std::size_t>(n) * c_n + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              sum_dy += d[base + i];
              sum_dy_xh += d[base + i] * st.x_hat[base + i];
            }
          }
          dgamma[c] = static_cast<T>(sum_dy_xh);
          dbeta[c] = static_cast<T>(sum_dy);
          if (!need_dx) continue;
          const double scale = static_cast<double>(gamma[c]) * st.inv_std[c];
          for (int n = 0; n < batch; ++n) {
            const std::size_t base = (static_cast<std::size_t>(n) * c_n + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              if (st.training)
                dx[base + i] = static_cast<T>(scale * (d[base + i] - sum_dy / count - st.x_hat[base + i] * sum_dy_xh / count));
              else
                dx[base + i] = static_cast<T>(scale * d[base + i]);
            }
          }
        }
        grads[l.name + ".gamma"] = std::move(dgamma);
        grads[l.name + ".beta"] = std::move(dbeta);
        break;
      }
      case LayerKind::ReLU:
        if (need_dx)
          for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > T{0} ? d[i] : T{0};
        break;
      case LayerKind::Sigmoid:
        if (need_dx)
          for (std::size_t i = 0; i < x.size(); ++i) dx[i] = d[i] * y[i] * (T{1} - y[i]);
        break;
      case LayerKind::AvgPool:
        if (need_dx) fast::avgpool2d_backward(d.data(), dx.data(), batch, pool_geometry(l, in));
        break;
      case LayerKind::Flatten:
        if (need_dx) dx.values() = d.values();
        break;
      case LayerKind::Linear: {
        const auto& w = model.param(l.name + ".weight");
        BasicTensor<T> dw(w.shape()), db({l.units});
        fast::linear_backward(x.data(), w.data(), d.data(), need_dx ? dx.data() : nullptr, dw.data(), db.data(),
                              batch, in[0], l.units);
        grads[l.name + ".weight"] = std::move(dw);
        grads[l.name + ".bias"] = std::move(db);
        break;
      }
    }
    d = std::move(dx);
  }
  return grads;
}

Tensor frames_to_batch(const std::vector<const EventFrame*>& frames) {
  if (frames.empty()) throw Error(ErrorCode::EmptyInput, "empty batch");
  const int c = frames.front()->channels;
  if (c <= 0 || frames.front()->data.size() % static_cast<std::size_t>(c) != 0)
    throw Error(ErrorCode::ShapeMismatch, "frame data does not match its channel count");
  // Frames are square; the side follows from the plane size.
  const std::size_t plane = frames.front()->data.size() / static_cast<std::size_t>(c);
  const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(plane))));
  if (static_cast<std::size_t>(side) * static_cast<std::size_t>(side) != plane || side == 0)
    throw Error(ErrorCode::ShapeMismatch, "frame is not square");
  Tensor batch({static_cast<int>(frames.size()), c, side, side});
  const std::size_t per = static_cast<std::size_t>(c) * plane;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    if (frames[i]->channels != c || frames[i]->data.size() != per)
      throw Error(ErrorCode::ShapeMismatch, "mixed frame shapes in batch");
    std::copy(frames[i]->data.begin(), frames[i]->data.end(), batch.data() + i * per);
  }
  return batch;
}

Tensor frame_to_batch(const EventFrame& frame) { return frames_to_batch({&frame}); }

std::array<float, 4> predict(const Model& model, const EventFrame& frame) {
  const Tensor out = forward(model, frame_to_batch(frame));
  if (out.size() != 4) throw Error(ErrorCode::ShapeMismatch, "model head does not produce 4 values");
  return {out[0], out[1], out[2], out[3]};
}

Decoded decode_output(const BBox& box, int grid) {
  return {box, box.cx * grid, box.cy * grid};
}

Decoded decode_output(std::span<const float> values, int grid) {
  if (values.size() != 4) throw Error(ErrorCode::ShapeMismatch, "decode_output needs 4 values");
  return decode_output(BBox{values[0], values[1], values[2], values[3]}, grid);
}

bool is_trainable(const std::string& name) {
  return !(name.ends_with(".running_mean") || name.ends_with(".running_var"));
}

template <typename T>
std::uint64_t count_params(const BasicModel<T>& model) {
  layer_shapes(model);
  std::uint64_t n = 0;
  for (const auto& [name, t] : model.weights)
    if (is_trainable(name)) n += t.size();
  return n;
}

template <typename T>
std::uint64_t count_macs(const BasicModel<T>& model) {
  const auto shapes = layer_shapes(model);
  std::uint64_t macs = 0;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const auto& l = model.layers[i];
    if (l.kind == LayerKind::Conv2d)
      macs += static_cast<std::uint64_t>(shape_size(shapes[i + 1])) * shapes[i][0] * l.kernel * l.kernel;
    else if (l.kind == LayerKind::Linear)
      macs += static_cast<std::uint64_t>(l.units) * shapes[i][0];
  }
  return macs;
}

std::uint64_t count_macs_instrumented(const Model& model) {
  MacCounter counter;
  ForwardOptions opts;
  opts.macs = &counter;
  forward(model, Tensor({1, model.in_channels, model.in_height, model.in_width}), opts);
  return counter.macs;
}

std::string describe_layer(const LayerSpec& l) {
  std::ostringstream out;
  out << layer_kind_name(l.kind) << ' ' << l.name;
  switch (l.kind) {
    case LayerKind::Conv2d:
      out << " out=" << l.out_channels << " k=" << l.kernel << " s=" << l.stride << " p=" << l.padding;
      break;
    case LayerKind::AvgPool:
      out << " k=" << l.kernel << " s=" << l.stride;
      break;
    case LayerKind::Linear:
      out << " units=" << l.units;
      break;
    default:
      break;
  }
  return out.str();
}

LayerSpec parse_layer(const std::vector<std::string>& tok) {
  if (tok.size() < 2) throw Error(ErrorCode::StructureMismatch, "short layer line");
  LayerSpec l;
  l.name = tok[1];
  const std::string& kind = tok[0];
  auto need = [&](std::size_t n) {
    if (tok.size() != n) throw Error(ErrorCode::StructureMismatch, "layer " + l.name + ": wrong field count");
  };
  if (kind == "conv2d") {
    need(6);
    l.kind = LayerKind::Conv2d;
    l.out_channels = parse_int(expect_kv(tok[2], "out"));
    l.kernel = parse_int(expect_kv(tok[3], "k"));
    l.stride = parse_int(expect_kv(tok[4], "s"));
    l.padding = parse_int(expect_kv(tok[5], "p"));
  } else if (kind == "avgpool") {
    need(4);
    l.kind = LayerKind::AvgPool;
    l.kernel = parse_int(expect_kv(tok[2], "k"));
    l.stride = parse_int(expect_kv(tok[3], "s"));
  } else if (kind == "linear") {
    need(3);
    l.kind = LayerKind::Linear;
    l.units = parse_int(expect_kv(tok[2], "units"));
  } else {
    need(2);
    if (kind == "batchnorm") l.kind = LayerKind::BatchNorm;
    else if (kind == "relu") l.kind = LayerKind::ReLU;
    else if (kind == "flatten") l.kind = LayerKind::Flatten;
    else if (kind == "sigmoid") l.kind = LayerKind::Sigmoid;
    else throw Error(ErrorCode::StructureMismatch, "unknown layer kind '" + kind + "'");
  }
  return l;
}

std::vector<std::uint8_t> serialize_model(const Model& model) {
  layer_shapes(model);
  std::ostringstream m;
  m << "quantized false\n";
  m << "input " << model.in_channels << ' ' << model.in_height << ' ' << model.in_width << '\n';
  m << "layers " << model.layers.size() << '\n';
  for (const auto& l : model.layers) m << "layer " << describe_layer(l) << '\n';
  m << "tensors " << model.weights.size() << '\n';
  std::vector<std::uint8_t> blob;
  for (const auto& [name, t] : model.weights) {
    m << "tensor " << name << " f32";
    for (int d : t.shape()) m << ' ' << d;
    m << '\n';
    for (float v : t.values()) put_f32(blob, v);
  }
  return seal_container(m.str(), blob);
}

Model deserialize_model(std::span<const std::uint8_t> bytes) {
  const OpenedContainer c = open_container(bytes);
  std::size_t li = 0;
  auto next = [&]() -> std::vector<std::string> {
    if (li >= c.lines.size()) throw Error(ErrorCode::StructureMismatch, "manifest ends early");
    return split_tokens(c.lines[li++]);
  };
  auto expect = [&](const std::vector<std::string>& tok, const std::string& key, std::size_t n) {
    if (tok.empty() || tok[0] != key || tok.size() != n)
      throw Error(ErrorCode::StructureMismatch, "expected '" + key + "' line");
  };

  auto tok = next();
  expect(tok, "quantized", 2);
  if (tok[1] != "false")
    throw Error(ErrorCode::StructureMismatch, "container holds a quantized model");
  Model model;
  tok = next();
  expect(tok, "input", 4);
  model.in_channels = parse_int(tok[1]);
  model.in_height = parse_int(tok[2]);
  model.in_width = parse_int(tok[3]);
  tok = next();
  expect(tok, "layers", 2);
  const int n_layers = parse_int(tok[1]);
  for (int i = 0; i < n_layers; ++i) {
    tok = next();
    if (tok.empty() || tok[0] != "layer") throw Error(ErrorCode::StructureMismatch, "layer count does not match");
    model.layers.push_back(parse_layer(std::vector<std::string>(tok.begin() + 1, tok.end())));
  }
  tok = next();
  if (tok.empty() || tok[0] != "tensors") throw Error(ErrorCode::StructureMismatch, "layer count does not match");
  expect(tok, "tensors", 2);
  const int n_tensors = parse_int(tok[1]);
  ByteReader blob(c.blob);
  for (int i = 0; i < n_tensors; ++i) {
    tok = next();
    if (tok.size() < 3 || tok[0] != "tensor" || tok[2] != "f32")
      throw Error(ErrorCode::StructureMismatch, "bad tensor line");
    Shape shape;
    for (std::size_t k = 3; k < tok.size(); ++k) shape.push_back(parse_int(tok[k]));
    Tensor t(shape);
    try {
      for (auto& v : t.values()) v = blob.f32();
    } catch (const Error&) {
      throw Error(ErrorCode::StructureMismatch, "blob shorter than manifest");
    }
    model.weights[tok[1]] = std::move(t);
  }
  if (li != c.lines.size() || blob.remaining() != 0)
    throw Error(ErrorCode::StructureMismatch, "trailing manifest lines or blob bytes");
  layer_shapes(model);
  return model;
}

void save_model(const Model& model, const std::string& path) { write_file(path, serialize_model(model)); }

Model load_model(const std::string& path) { return deserialize_model(read_file(path)); }

#define EVTRACK_INSTANTIATE(T)                                                                      \
  template struct BasicModel<T>;                                                                   \
  template std::vector<Shape> layer_shapes<T>(const BasicModel<T>&);                               \
  template void init_weights<T>(BasicModel<T>&, std::uint64_t);                                     \
  template BasicModel<T> make_model<T>(int, int, int, std::vector<LayerSpec>, std::uint64_t);       \
  template BasicTensor<T> forward<T>(const BasicModel<T>&, const BasicTensor<T>&,                  \
                                     const ForwardOptions&, ForwardTrace<T>*);                      \
  template BasicGradients<T> backward<T>(const BasicModel<T>&, const ForwardTrace<T>&,             \
                                         const BasicTensor<T>&);                                    \
  template std::uint64_t count_params<T>(const BasicModel<T>&);                                    \
  template std::uint64_t count_macs<T>(const BasicModel<T>&);

EVTRACK_INSTANTIATE(float)
EVTRACK_INSTANTIATE(double)
#undef EVTRACK_INSTANTIATE

}  // namespace evtrack
