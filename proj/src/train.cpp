#include "evtrack/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "evtrack/bytes.hpp"
#include "evtrack/error.hpp"
#include "evtrack/rng.hpp"

namespace evtrack {

namespace {

struct Interval {
  double overlap = 0;
  double d_center = 0;  // d overlap / d pred center
  double d_size = 0;    // d overlap / d pred size
};

// Overlap of [pc - ps/2, pc + ps/2] with [tc - ts/2, tc + ts/2] and its
// (sub)gradient with respect to the predicted center and size.
Interval overlap_1d(double pc, double ps, double tc, double ts) {
  const double p1 = pc - ps / 2, p2 = pc + ps / 2;
  const double t1 = tc - ts / 2, t2 = tc + ts / 2;
  const bool hi_from_pred = p2 <= t2;
  const bool lo_from_pred = p1 >= t1;
  Interval r;
  r.overlap = std::min(p2, t2) - std::max(p1, t1);
  r.d_center = (hi_from_pred ? 1.0 : 0.0) - (lo_from_pred ? 1.0 : 0.0);
  r.d_size = 0.5 * (hi_from_pred ? 1.0 : 0.0) + 0.5 * (lo_from_pred ? 1.0 : 0.0);
  return r;
}

struct IouGrad {
  double iou = 0;
  double d[4] = {0, 0, 0, 0};  // d iou / d (cx, cy, w, h) of the prediction
};

IouGrad iou_with_grad(const double* p, const double* t) {
  IouGrad g;
  const Interval ix = overlap_1d(p[0], p[2], t[0], t[2]);
  const Interval iy = overlap_1d(p[1], p[3], t[1], t[3]);
  const double area_p = p[2] * p[3];
  const double area_t = t[2] * t[3];
  const bool intersects = ix.overlap > 0 && iy.overlap > 0;
  const double inter = intersects ? ix.overlap * iy.overlap : 0.0;
  const double uni = area_p + area_t - inter;
  if (!(uni > 0)) return g;
  g.iou = inter / uni;

  double d_inter[4] = {0, 0, 0, 0};
  if (intersects) {
    d_inter[0] = iy.overlap * ix.d_center;
    d_inter[1] = ix.overlap * iy.d_center;
    d_inter[2] = iy.overlap * ix.d_size;
    d_inter[3] = ix.overlap * iy.d_size;
  }
  const double d_area[4] = {0, 0, p[3], p[2]};
  // iou = I / (A + B - I)  =>  d iou = (dI (U + I) - I dA) / U^2
  for (int k = 0; k < 4; ++k) g.d[k] = (d_inter[k] * (uni + inter) - inter * d_area[k]) / (uni * uni);
  return g;
}

}  // namespace

double iou(const BBox& a, const BBox& b) {
  const double p[4] = {a.cx, a.cy, a.w, a.h};
  const double t[4] = {b.cx, b.cy, b.w, b.h};
  return iou_with_grad(p, t).iou;
}

template <typename T>
LossResult<T> box_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target, const TrainConfig& cfg) {
  if (pred.shape() != target.shape() || pred.rank() != 2 || pred.dim(1) != 4)
    throw Error(ErrorCode::ShapeMismatch, "loss expects matching [N,4] tensors");
  const int n = pred.dim(0);
  if (n == 0) throw Error(ErrorCode::EmptyInput, "empty batch");
  LossResult<T> r;
  r.grad = BasicTensor<T>(pred.shape());
  double total = 0;
  for (int i = 0; i < n; ++i) {
    double p[4], t[4];
    for (int k = 0; k < 4; ++k) {
      p[k] = pred[static_cast<std::size_t>(i) * 4 + k];
      t[k] = target[static_cast<std::size_t>(i) * 4 + k];
    }
    const IouGrad ig = iou_with_grad(p, t);
    const double dx = p[0] - t[0], dy = p[1] - t[1];
    const double dist = std::sqrt(dx * dx + dy * dy);
    total += cfg.iou_weight * (1.0 - ig.iou) + cfg.dist_weight * dist;

    double g[4];
    for (int k = 0; k < 4; ++k) g[k] = -cfg.iou_weight * ig.d[k];
    if (dist > 0) {
      g[0] += cfg.dist_weight * dx / dist;
      g[1] += cfg.dist_weight * dy / dist;
    }
    for (int k = 0; k < 4; ++k) r.grad[static_cast<std::size_t>(i) * 4 + k] = static_cast<T>(g[k] / n);
  }
  r.value = static_cast<T>(total / n);
  return r;
}

template <typename T>
BasicTensor<T> boxes_to_tensor(std::span<const BBox> boxes) {
  BasicTensor<T> t({static_cast<int>(boxes.size()), 4});
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    t[i * 4 + 0] = static_cast<T>(boxes[i].cx);
    t[i * 4 + 1] = static_cast<T>(boxes[i].cy);
    t[i * 4 + 2] = static_cast<T>(boxes[i].w);
    t[i * 4 + 3] = static_cast<T>(boxes[i].h);
  }
  return t;
}

double loss(std::span<const BBox> pred, std::span<const BBox> target, const TrainConfig& cfg) {
  if (pred.size() != target.size()) throw Error(ErrorCode::ShapeMismatch, "batch sizes differ");
  return box_loss(boxes_to_tensor<double>(pred), boxes_to_tensor<double>(target), cfg).value;
}

template <typename T>
StepResult<T> compute_gradients(const BasicModel<T>& model, const BasicTensor<T>& inputs,
                                const BasicTensor<T>& targets, const TrainConfig& cfg) {
  StepResult<T> r;
  ForwardOptions opts;
  opts.training_bn = true;
  opts.check_finite = false;
  const BasicTensor<T> out = forward(model, inputs, opts, &r.trace);
  const LossResult<T> l = box_loss(out, targets, cfg);
  if (!std::isfinite(static_cast<double>(l.value))) {
    std::string culprit = "loss";
    for (std::size_t i = 1; i < r.trace.inputs.size(); ++i) {
      const auto& v = r.trace.inputs[i].values();
      if (std::any_of(v.begin(), v.end(), [](T x) { return !std::isfinite(static_cast<double>(x)); })) {
        culprit = model.layers[i - 1].name;
        break;
      }
    }
    throw Error(ErrorCode::NonFinite, "non-finite loss; first bad activation at " + culprit);
  }
  r.loss = l.value;
  r.grads = backward(model, r.trace, l.grad);
  for (const auto& layer : model.layers)
    for (const char* suffix : {".weight", ".bias", ".gamma", ".beta"}) {
      auto it = r.grads.find(layer.name + suffix);
      if (it == r.grads.end()) continue;
      for (T v : it->second.values())
        if (!std::isfinite(static_cast<double>(v)))
          throw Error(ErrorCode::NonFinite, "non-finite gradient in layer " + layer.name);
    }
  return r;
}

void adam_step(Model& model, const Gradients& grads, AdamState& state, double lr) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (const auto& [name, g] : grads) {
    if (!is_trainable(name)) continue;
    Tensor& w = model.param(name);
    if (w.shape() != g.shape()) throw Error(ErrorCode::ShapeMismatch, "gradient shape for " + name);
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) {
      m.assign(w.size(), 0.0);
      v.assign(w.size(), 0.0);
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      w[i] = static_cast<float>(w[i] - lr * m_hat / (std::sqrt(v_hat) + state.epsilon));
    }
  }
}

double lr_schedule(std::int64_t iter, const TrainConfig& cfg) {
  if (cfg.step_size_iters < 1 || !(cfg.gamma > 0) || cfg.gamma > 1)
    throw Error(ErrorCode::InvalidArgument, "scheduler needs step_size >= 1 and gamma in (0,1]");
  return cfg.lr * std::pow(cfg.gamma, static_cast<double>(iter / cfg.step_size_iters));
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed ^ (0xD1B54A32D192ED03ull * static_cast<std::uint64_t>(epoch + 1)));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

namespace {

void update_running_stats(Model& model, const ForwardTrace<float>& trace, double momentum) {
  for (const auto& [li, st] : trace.bn) {
    const auto& layer = model.layers[li];
    auto& rm = model.param(layer.name + ".running_mean");
    auto& rv = model.param(layer.name + ".running_var");
    const auto& x = trace.inputs[li];
    const double count = static_cast<double>(x.size()) / rm.size();
    const double unbias = count > 1 ? count / (count - 1) : 1.0;
    for (std::size_t c = 0; c < rm.size(); ++c) {
      rm[c] = static_cast<float>((1 - momentum) * rm[c] + momentum * st.mean[c]);
      rv[c] = static_cast<float>((1 - momentum) * rv[c] + momentum * st.var[c] * unbias);
    }
  }
}

}  // namespace

TrainResult train(Model model, std::span<const LabeledSample> dataset, const TrainConfig& cfg,
                  const TrainCallback& callback) {
  if (dataset.empty()) throw Error(ErrorCode::EmptyInput, "training set is empty");
  if (cfg.batch_size < 1 || cfg.epochs < 1 || !(cfg.lr > 0) || cfg.iou_weight < 0 || cfg.dist_weight < 0)
    throw Error(ErrorCode::InvalidArgument, "bad training configuration");
  TrainResult result;
  std::int64_t iter = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = epoch_order(dataset.size(), cfg.seed, epoch);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const EventFrame*> frames;
      std::vector<BBox> targets;
      for (std::size_t i = start; i < end; ++i) {
        frames.push_back(&dataset[order[i]].frame);
        targets.push_back(dataset[order[i]].target);
      }
      const Tensor inputs = frames_to_batch(frames);
      const Tensor target_t = boxes_to_tensor<float>(targets);
      auto step = compute_gradients(model, inputs, target_t, cfg);
      const double lr = lr_schedule(iter, cfg);
      adam_step(model, step.grads, result.optimizer, lr);
      update_running_stats(model, step.trace, cfg.bn_momentum);
      const LossPoint point{iter, lr, static_cast<double>(step.loss)};
      result.curve.push_back(point);
      ++iter;
      if (callback && !callback(point)) {
        result.model = std::move(model);
        return result;
      }
    }
  }
  result.model = std::move(model);
  return result;
}

std::string loss_curve_csv(std::span<const LossPoint> curve) {
  std::ostringstream out;
  out << "iter,lr,loss\n";
  out.precision(9);
  for (const auto& p : curve) out << p.iter << ',' << p.lr << ',' << p.loss << '\n';
  return out.str();
}

void save_optimizer_state(const AdamState& state, const std::string& path) {
  std::vector<std::uint8_t> out{'E', 'V', 'T', 'A', 'D', 'A', 'M', '1'};
  auto put_f64 = [&](double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(out, bits);
  };
  put_u64(out, static_cast<std::uint64_t>(state.step));
  put_f64(state.beta1);
  put_f64(state.beta2);
  put_f64(state.epsilon);
  put_u32(out, static_cast<std::uint32_t>(state.m.size()));
  for (const auto& [name, m] : state.m) {
    const auto& v = state.v.at(name);
    put_u16(out, static_cast<std::uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put_u32(out, static_cast<std::uint32_t>(m.size()));
    for (double x : m) put_f64(x);
    for (double x : v) put_f64(x);
  }
  put_u32(out, crc32(out));
  write_file(path, out);
}

AdamState load_optimizer_state(const std::string& path) {
  const auto bytes = read_file(path);
  if (bytes.size() < 12 || std::string(bytes.begin(), bytes.begin() + 8) != "EVTADAM1")
    throw Error(ErrorCode::BadMagic, "not an optimizer state file");
  const std::span<const std::uint8_t> all(bytes);
  ByteReader crc_reader(all.subspan(bytes.size() - 4));
  if (crc32(all.first(bytes.size() - 4)) != crc_reader.u32())
    throw Error(ErrorCode::ChecksumMismatch, "optimizer state CRC mismatch");
  ByteReader in(all.first(bytes.size() - 4));
  in.skip(8);
  auto f64 = [&]() {
    const std::uint64_t bits = in.u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  };
  AdamState s;
  s.step = static_cast<std::int64_t>(in.u64());
  s.beta1 = f64();
  s.beta2 = f64();
  s.epsilon = f64();
  const std::uint32_t n = in.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto len = in.u16();
    const auto name_bytes = in.take(len);
    std::string name(name_bytes.begin(), name_bytes.end());
    const std::uint32_t size = in.u32();
    auto& m = s.m[name];
    auto& v = s.v[name];
    m.resize(size);
    v.resize(size);
    for (auto& x : m) x = f64();
    for (auto& x : v) x = f64();
  }
  if (in.remaining() != 0) throw Error(ErrorCode::StructureMismatch, "trailing optimizer bytes");
  return s;
}

template LossResult<float> box_loss<float>(const BasicTensor<float>&, const BasicTensor<float>&, const TrainConfig&);
template LossResult<double> box_loss<double>(const BasicTensor<double>&, const BasicTensor<double>&, const TrainConfig&);
template BasicTensor<float> boxes_to_tensor<float>(std::span<const BBox>);
template BasicTensor<double> boxes_to_tensor<double>(std::span<const BBox>);
template StepResult<float> compute_gradients<float>(const BasicModel<float>&, const BasicTensor<float>&,
                                                    const BasicTensor<float>&, const TrainConfig&);
template StepResult<double> compute_gradients<double>(const BasicModel<double>&, const BasicTensor<double>&,
                                                      const BasicTensor<double>&, const TrainConfig&);

}  // namespace evtrack
