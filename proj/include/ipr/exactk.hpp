#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "ipr/graph.hpp"
#include "ipr/rng.hpp"
#include "ipr/tape.hpp"
#include "ipr/tensor.hpp"

namespace ipr {
namespace exactk {

// Logits are clamped to [-kLogitClamp, kLogitClamp] before exponentiation;
// the clamp gradient is zero outside the open interval.
inline constexpr double kLogitClamp = 30.0;

// NaN/inf logits.  Distinct from plain argument errors because they usually
// mean an upstream computation blew up (e.g. runaway step size) rather than a
// caller bug; training loops convert this into their divergence handling.
struct NonFiniteLogits : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Distribution over m-bit rows with exactly k ones, obtained by conditioning
// independent Bernoulli(sigmoid(theta_j)) entries on a row sum of k.  With
// w_j = exp(theta_j) the normalizer is proportional to the k-th elementary
// symmetric polynomial e_k(w); all computations run in log space via a
// logaddexp dynamic program over prefix/suffix polynomial tables.

// log e_k(exp(clamped logits)).  Requires 1 <= k <= m and finite logits.
double log_partition(const std::vector<double>& logits, std::int64_t k);

// Inclusion marginals mu_j = P(row_j = 1 | sum = k) = w_j e_{k-1}(w_{-j}) / e_k(w).
std::vector<double> marginals(const std::vector<double>& logits, std::int64_t k);

// Exact draw: sequential conditional scan over items i = m..1 with t slots
// remaining; item i is included with probability w_i e_{t-1}(w_{1..i-1}) / e_t(w_{1..i}).
// Returns the k chosen indices, sorted ascending.
std::vector<std::int32_t> sample_row(const std::vector<double>& logits, std::int64_t k, Rng& rng);

// Row-wise independent draws for an [n x m] prior matrix.  Row v uses the
// stream derived from (seed, graph_index, sample_index, v).
AssignmentMatrix sample_assignment(const Tensor& priors, std::int64_t k, std::uint64_t seed,
                                   std::uint64_t graph_index, std::uint64_t sample_index);

// Vector-Jacobian product u^T (d mu / d theta), computed by reverse sweeps
// over the marginal dynamic program (exact, O(m k)).
std::vector<double> marginal_jacobian_vp(const std::vector<double>& logits, std::int64_t k,
                                         const std::vector<double>& upstream);

// One sampled assignment: discrete structure plus the same values as a
// tape tensor whose backward routes gradients through marginal_jacobian_vp.
struct AssignmentSample {
  AssignmentMatrix structure;
  Tensor weights;  // [n x m] binary, tape-bound
};

// Draw q assignments from row-wise exactly-k distributions with priors
// theta [n x m].  Forward emits the discrete samples; backward treats each
// row as if its marginal vector had been used (one custom-gradient node per
// row per sample), i.e. grad theta = (d mu / d theta)^T grad H.
std::vector<AssignmentSample> straight_through_assign(Tape& tape, const Tensor& priors,
                                                      std::int64_t k, std::int64_t q,
                                                      std::uint64_t seed, std::uint64_t graph_index);

// Smooth surrogate used by the relaxed-forward diagnostic mode: the row-wise
// marginal matrix mu(theta) [n x m], built from tape primitives so gradients
// flow through the dynamic program itself.
Tensor relaxed_assignment(const Tensor& priors, std::int64_t k);

}  // namespace exactk
}  // namespace ipr
