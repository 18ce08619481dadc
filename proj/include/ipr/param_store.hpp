#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ipr/tape.hpp"
#include "ipr/tensor.hpp"

namespace ipr {

// Named flat map of trainable arrays plus their gradient accumulators.
// Serializes to a single self-describing binary file (8-byte magic
// "IPRPARM1", little-endian payload) and exports to JSON for inspection.
class ParameterStore {
 public:
  // Create a new zero-gradient parameter.  Fails if the name exists.
  Tensor& create(const std::string& name, Shape shape, const std::vector<double>& values);

  bool contains(const std::string& name) const { return params_.count(name) > 0; }
  const Tensor& value(const std::string& name) const;
  Tensor& value(const std::string& name);
  std::vector<double>& grad(const std::string& name);
  const std::vector<double>& grad(const std::string& name) const;

  std::vector<std::string> names() const;
  std::size_t size() const { return params_.size(); }

  // Bind a parameter as a differentiable tape leaf.
  Tensor leaf(Tape& tape, const std::string& name);
  // Add the tape's parameter-leaf gradients into this store's accumulators.
  void accumulate_from(const Tape& tape);
  void zero_grads();

  // L2 norm over all gradient accumulators, and in-place scaling; used for
  // global-norm clipping.
  double grad_global_norm() const;
  void scale_grads(double factor);

  void save(const std::string& path) const;
  static ParameterStore load(const std::string& path);
  std::string to_json() const;

 private:
  struct Entry {
    Tensor value;
    std::vector<double> grad;
  };
  std::map<std::string, Entry> params_;
};

}  // namespace ipr
