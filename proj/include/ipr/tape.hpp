#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "ipr/tensor.hpp"

namespace ipr {

enum class Reduce { sum, mean, max };

// Row grouping used by gather/scatter style ops: group g covers
// rows[offsets[g] .. offsets[g+1]).  Groups may be empty and may overlap.
struct RowGroups {
  std::vector<std::int64_t> offsets;  // size G+1, offsets[0] == 0
  std::vector<std::int32_t> rows;

  std::int64_t group_count() const { return static_cast<std::int64_t>(offsets.size()) - 1; }
  static RowGroups from_lists(const std::vector<std::vector<std::int32_t>>& lists);
};

// Reverse-mode tape.  Nodes are appended in forward order; backward walks
// them once in reverse.  A tape lives for a single forward/backward pass and
// must stay confined to one thread, along with every tensor bound to it.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Bind a constant or parameter as a leaf.  Parameter leaves are remembered
  // by name so their gradients can be exported after backward.
  Tensor leaf(const Tensor& t);
  Tensor leaf_param(const Tensor& t, const std::string& name);

  // Run reverse accumulation from a one-element tensor, seeding d loss/d loss = 1.
  void backward(const Tensor& loss);

  // Seeded variant for Jacobian sweeps: clears gradients, sets the gradient
  // of `t` to `seed`, and sweeps backward from its node.
  void backward_from(const Tensor& t, const std::vector<double>& seed);

  // Gradient of a tape-bound tensor after backward; zeros if never reached.
  std::vector<double> grad(const Tensor& t) const;

  void clear_grads();

  // (name, node) pairs for every parameter leaf, in binding order.
  const std::vector<std::pair<std::string, std::int64_t>>& params() const { return params_; }
  const std::vector<double>& node_grad(std::int64_t node) const;

  std::int64_t node_count() const { return static_cast<std::int64_t>(nodes_.size()); }

  // --- internal plumbing used by the op implementations ---
  using BackFn = std::function<void(Tape&, std::int64_t)>;
  std::int64_t add_node(std::vector<std::int64_t> parents, BackFn back, std::int64_t grad_size);
  std::vector<double>& grad_buffer(std::int64_t node);
  bool grad_touched(std::int64_t node) const;

 private:
  struct Node {
    std::vector<std::int64_t> parents;
    BackFn back;
    std::int64_t grad_size = 0;
  };
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  std::vector<std::pair<std::string, std::int64_t>> params_;
};

// Operations.  Each works on plain tensors when no operand is tape-bound
// (pure evaluation) and records a backward closure otherwise.  Elementwise
// binaries accept equal shapes or a one-element operand broadcast against
// the other; no other broadcasting exists — reshape explicitly instead.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor logaddexp(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& t);
Tensor relu(const Tensor& t);
Tensor clamp(const Tensor& t, double lo, double hi);  // gradient passes through strictly inside [lo, hi]
Tensor sigmoid(const Tensor& t);
Tensor tlog(const Tensor& t);   // elementwise natural log; non-positive entry -> domain error
Tensor texp(const Tensor& t);
Tensor add_scalar(const Tensor& t, double c);
Tensor scale(const Tensor& t, double c);
Tensor add_bias(const Tensor& mat, const Tensor& bias);  // [n x d] + [d], explicit row broadcast

// Row-wise layer normalization of a rank-2 tensor:
//   y[r, :] = gain * (x[r, :] - mean_r) / sqrt(var_r + 1e-5) + bias
// with per-feature gain/bias vectors ([d] each) and population variance.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);

Tensor reduce(const Tensor& t, Reduce op);                     // full reduction -> scalar
Tensor reduce_axis(const Tensor& t, Reduce op, int axis);      // rank-2 only
Tensor reshape(const Tensor& t, Shape new_shape);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor gather_rows(const Tensor& t, const std::vector<std::int64_t>& idx);
Tensor group_reduce(const Tensor& t, const RowGroups& groups, Reduce op);

// out row-block b = H_b^T * h_b  where h is partitioned by the H block row
// counts; used to pool node states into per-block virtual states.
Tensor assign_aggregate(const std::vector<Tensor>& h_blocks_weights, const Tensor& h);
// out row-block b = H_b * g_b where g is partitioned by the H block column
// counts; the reverse move, distributing virtual states back to nodes.
Tensor assign_distribute(const std::vector<Tensor>& h_blocks_weights, const Tensor& g);

// Custom-gradient node: forward `value` with arbitrary parents; backward maps
// the upstream gradient to one gradient per parent (shapes must match).
Tensor custom_grad(Tape& tape, const Tensor& value, const std::vector<Tensor>& parents,
                   std::function<std::vector<std::vector<double>>(const std::vector<double>&)> back);

// Fused losses (mean over examples), numerically stable in the logits.
Tensor cross_entropy_logits(const Tensor& logits, const std::vector<std::int64_t>& targets);
Tensor bce_logits(const Tensor& logits, const std::vector<double>& targets);
Tensor l1_loss(const Tensor& pred, const Tensor& target);
Tensor l2_loss(const Tensor& pred, const Tensor& target);

// Max relative disagreement between reverse-mode and central finite
// differences of a scalar-valued function at x:
//   max_i |analytic_i - fd_i| / (|fd_i| + 1e-12)
// eps must lie in (0, 1e-2].
double grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f, const Tensor& x,
                  double eps);

}  // namespace ipr
