#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "dign/errors.hpp"

namespace dign {

using Shape = std::vector<int64_t>;

std::string shape_to_string(const Shape& s);
int64_t shape_numel(const Shape& s);

// Dense row-major float64 tensor. Immutable by convention once handed to a
// Tape; mutation helpers exist for construction and optimizer updates.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);  // zero-filled
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  const Shape& shape() const { return shape_; }
  int64_t size() const { return static_cast<int64_t>(data_.size()); }
  int64_t extent(size_t dim) const { return shape_.at(dim); }
  size_t rank() const { return shape_.size(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }
  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }

  // 2-D and 4-D accessors; bounds are the caller's responsibility.
  double at2(int64_t i, int64_t j) const { return data_[i * shape_[1] + j]; }
  double& at2(int64_t i, int64_t j) { return data_[i * shape_[1] + j]; }
  double at4(int64_t b, int64_t c, int64_t h, int64_t w) const {
    return data_[((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  double& at4(int64_t b, int64_t c, int64_t h, int64_t w) {
    return data_[((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;

  // Returns a copy with the given shape; element count must match.
  Tensor reshaped(Shape new_shape) const;

  std::string shape_str() const { return shape_to_string(shape_); }

 private:
  Shape shape_;
  std::vector<double> data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw DimError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                   b.shape_str());
  }
}

}  // namespace dign
