#include "dign/tensor.hpp"

#include <cmath>
#include <sstream>

namespace dign {

std::string shape_to_string(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << ")";
  return os.str();
}

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
  return n;
}

static void check_shape(const Shape& s) {
  for (int64_t e : s) {
    if (e <= 0) {
      throw DimError("tensor shape has non-positive extent " + shape_to_string(s));
    }
  }
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(static_cast<size_t>(shape_numel(shape_)), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (shape_numel(shape_) != static_cast<int64_t>(data_.size())) {
    throw DimError("tensor data length " + std::to_string(data_.size()) +
                   " does not match shape " + shape_to_string(shape_));
  }
}

Tensor Tensor::full(Shape shape, double value) {
  Tensor t(std::move(shape));
  for (auto& v : t.data_) v = value;
  return t;
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor Tensor::reshaped(Shape new_shape) const {
  if (shape_numel(new_shape) != size()) {
    throw DimError("reshape " + shape_str() + " -> " + shape_to_string(new_shape) +
                   " changes element count");
  }
  return Tensor(std::move(new_shape), data_);
}

}  // namespace dign
