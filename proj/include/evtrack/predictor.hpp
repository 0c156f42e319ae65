#pragma once

#include <array>
#include <string>
#include <variant>

#include "evtrack/model.hpp"
#include "evtrack/quant.hpp"

namespace evtrack {

/// A loaded model of either flavour behind one prediction call.
class Predictor {
 public:
  explicit Predictor(Model model);
  explicit Predictor(QuantizedModel model);

  // Reads a model container and picks the flavour from its manifest.
  static Predictor load(const std::string& path);

  std::array<float, 4> operator()(const EventFrame& frame) const;

  int channels() const;
  bool quantized() const { return std::holds_alternative<QuantizedModel>(model_); }
  const Model* float_model() const { return std::get_if<Model>(&model_); }
  const QuantizedModel* int_model() const { return std::get_if<QuantizedModel>(&model_); }

 private:
  std::variant<Model, QuantizedModel> model_;
};

// True if the container bytes hold a quantized model. Validates the container.
bool is_quantized_container(std::span<const std::uint8_t> bytes);

}  // namespace evtrack
