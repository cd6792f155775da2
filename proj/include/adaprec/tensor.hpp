#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace adaprec {

using Shape = std::vector<std::int64_t>;

std::string shape_to_string(std::span<const std::int64_t> shape);

// Row-major strides in elements.
std::vector<std::int64_t> strides_of(std::span<const std::int64_t> shape);

// Dense row-major tensor carried in double width regardless of the format it
// was produced in.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> values);

  static Tensor zeros(Shape s);
  static Tensor filled(Shape s, double value);
  static Tensor scalar(double value);

  std::size_t size() const { return data.size(); }
  std::int64_t rank() const { return static_cast<std::int64_t>(shape.size()); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  // 2-D convenience accessors.
  double& at(std::int64_t r, std::int64_t c) { return data[static_cast<std::size_t>(r * shape[1] + c)]; }
  double at(std::int64_t r, std::int64_t c) const {
    return data[static_cast<std::size_t>(r * shape[1] + c)];
  }

  bool all_finite() const;
};

}  // namespace adaprec
