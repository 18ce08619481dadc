#include "ipr/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace ipr {

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (std::int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << "]";
  return os.str();
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
  for (std::int64_t d : shape_) {
    if (d < 0) throw std::invalid_argument("tensor dimension must be non-negative, got shape " + shape_str(shape_));
  }
  if (shape_numel(shape_) != static_cast<std::int64_t>(values.size())) {
    throw std::invalid_argument("tensor shape " + shape_str(shape_) + " wants " +
                                std::to_string(shape_numel(shape_)) + " values, got " +
                                std::to_string(values.size()));
  }
  data_ = std::make_shared<std::vector<double>>(std::move(values));
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  for (std::int64_t d : shape_) {
    if (d < 0) throw std::invalid_argument("tensor dimension must be non-negative, got shape " + shape_str(shape_));
  }
  data_ = std::make_shared<std::vector<double>>(static_cast<std::size_t>(shape_numel(shape_)), 0.0);
}

Tensor Tensor::full(Shape shape, double v) {
  Tensor t(std::move(shape));
  for (double& x : *t.data_) x = v;
  return t;
}

std::int64_t Tensor::rows() const {
  if (shape_.size() != 2) throw std::invalid_argument("rows() needs a rank-2 tensor, got shape " + shape_str(shape_));
  return shape_[0];
}

std::int64_t Tensor::cols() const {
  if (shape_.size() != 2) throw std::invalid_argument("cols() needs a rank-2 tensor, got shape " + shape_str(shape_));
  return shape_[1];
}

double Tensor::at(std::int64_t r, std::int64_t c) const {
  return (*data_)[static_cast<std::size_t>(r * cols() + c)];
}

double Tensor::scalar_value() const {
  if (numel() != 1) throw std::invalid_argument("scalar_value() needs a one-element tensor, got shape " + shape_str(shape_));
  return (*data_)[0];
}

bool Tensor::all_finite() const {
  for (double v : *data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace ipr
