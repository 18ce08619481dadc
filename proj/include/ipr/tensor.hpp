#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace ipr {

class Tape;

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);
bool same_shape(const Shape& a, const Shape& b);

// Dense tensor of 64-bit floats.  The payload is shared (ops never mutate
// their inputs), so copies are cheap handles.  A tensor may optionally be
// bound to a tape node, in which case `tape`/`node` identify where its
// gradient will be accumulated during backward.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values);
  explicit Tensor(Shape shape);  // zero-filled

  static Tensor scalar(double v) { return Tensor({}, {v}); }
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double v);

  const Shape& shape() const { return shape_; }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_->size()); }
  std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
  std::int64_t rows() const;
  std::int64_t cols() const;

  const double* data() const { return data_->data(); }
  double* mutable_data() { return data_->data(); }
  const std::vector<double>& values() const { return *data_; }

  double at(std::int64_t i) const { return (*data_)[static_cast<std::size_t>(i)]; }
  double at(std::int64_t r, std::int64_t c) const;
  double scalar_value() const;

  bool all_finite() const;

  // Tape binding (set by ops / Tape::leaf).  node < 0 means "constant".
  Tape* tape = nullptr;
  std::int64_t node = -1;
  bool on_tape() const { return tape != nullptr && node >= 0; }

 private:
  Shape shape_;
  std::shared_ptr<std::vector<double>> data_ = std::make_shared<std::vector<double>>();
};

}  // namespace ipr
