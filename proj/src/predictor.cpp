#include "evtrack/predictor.hpp"

#include "evtrack/bytes.hpp"
#include "evtrack/container.hpp"
#include "evtrack/error.hpp"

namespace evtrack {

Predictor::Predictor(Model model) : model_(std::move(model)) { layer_shapes(std::get<Model>(model_)); }

Predictor::Predictor(QuantizedModel model) : model_(std::move(model)) {}

bool is_quantized_container(std::span<const std::uint8_t> bytes) {
  const OpenedContainer c = open_container(bytes);
  if (c.lines.empty()) throw Error(ErrorCode::StructureMismatch, "empty manifest");
  const auto tok = split_tokens(c.lines[0]);
  if (tok.size() != 2 || tok[0] != "quantized") throw Error(ErrorCode::StructureMismatch, "expected 'quantized' line");
  return tok[1] == "true";
}

Predictor Predictor::load(const std::string& path) {
  const std::vector<std::uint8_t> bytes = read_file(path);
  if (is_quantized_container(bytes)) return Predictor(deserialize_qmodel(bytes));
  return Predictor(deserialize_model(bytes));
}

std::array<float, 4> Predictor::operator()(const EventFrame& frame) const {
  if (const auto* q = std::get_if<QuantizedModel>(&model_)) return quantized_forward(*q, frame);
  return predict(std::get<Model>(model_), frame);
}

int Predictor::channels() const {
  return std::visit([](const auto& m) { return m.in_channels; }, model_);
}

}  // namespace evtrack
