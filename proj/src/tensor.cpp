#include "adaprec/tensor.hpp"

#include <cmath>

#include "adaprec/errors.hpp"
#include "adaprec/numerics.hpp"

namespace adaprec {

std::string shape_to_string(std::span<const std::int64_t> shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

std::vector<std::int64_t> strides_of(std::span<const std::int64_t> shape) {
  std::vector<std::int64_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
  if (element_count(shape) != data.size()) {
    throw ShapeError("tensor data has " + std::to_string(data.size()) + " values but shape " +
                     shape_to_string(shape) + " needs " + std::to_string(element_count(shape)));
  }
}

Tensor Tensor::zeros(Shape s) { return filled(std::move(s), 0.0); }

Tensor Tensor::filled(Shape s, double value) {
  const auto n = element_count(s);
  return Tensor(std::move(s), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

bool Tensor::all_finite() const {
  for (double v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace adaprec
