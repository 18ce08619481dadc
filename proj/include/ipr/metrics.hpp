#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>

#include "ipr/graph.hpp"
#include "ipr/model.hpp"
#include "ipr/param_store.hpp"

namespace ipr {

// Electrical view of a graph: every edge is a unit resistor and R(u, v) is
// the resistance between the two terminals.  r_total sums R over all
// intra-component pairs u < v and serves as a connectivity-quality proxy:
// rewiring that shortens effective paths strictly lowers it.
struct ResistanceReport {
  double r_total = 0.0;
  std::map<std::pair<std::int64_t, std::int64_t>, double> per_pair;  // keys u < v
  std::string graph_id;
};

// Pairwise resistances via the Laplacian pseudoinverse,
// R(u, v) = L+_uu + L+_vv - 2 L+_uv, computed per connected component with an
// eigendecomposition (eigenvalues below 1e-9 are treated as the null space).
// Disconnected inputs are handled per component; cross-component pairs are
// omitted rather than scored as infinite.
ResistanceReport effective_resistance(const AttributedGraph& g);

// Resistance over the ORIGINAL node pairs after augmenting the graph with the
// virtual hierarchy: one new node per virtual node, unit edges from each
// original node to its assigned virtual nodes, and a unit-weight complete
// graph over the virtual nodes.  Adding resistors never raises any pairwise
// resistance (Rayleigh monotonicity), so r_total here is at most the
// unrewired value, and strictly below it whenever the attachments create a
// new path between some original pair.
ResistanceReport rewired_resistance(const AttributedGraph& g, const AssignmentMatrix& h);

struct DistantPair {
  std::int64_t u = 0;
  std::int64_t v = 0;
  std::int64_t dist = 0;
};

// A pair attaining the graph diameter (breadth-first search from every node),
// ties broken lexicographically by (u, v).  Throws std::invalid_argument on
// disconnected input.
DistantPair most_distant_pair(const AttributedGraph& g);

// Symmetric inter-node sensitivity across downstream layers:
// log of the entrywise L1 norm of  d h_v^{l} / d h_u^{k} + d h_u^{l} / d h_v^{k},
// the Jacobians computed exactly with one reverse sweep per output dimension.
// When u == v the two Jacobians coincide and only one is counted, so the
// identity case k_layer == l_layer scores log(d_hidden_down).  A norm of
// exactly zero - the under-reaching regime - returns -infinity.
//
// With ds_enabled the wiring is one sampled assignment drawn from the
// upstream priors using `seed`; without it the value depends only on the
// plain message-passing stack, and is exactly zero whenever the graph
// distance between u and v exceeds l_layer - k_layer.
double layer_sensitivity(const AttributedGraph& g, const ModelSpec& spec, ParameterStore& params,
                         std::int64_t u, std::int64_t v, std::int64_t k_layer,
                         std::int64_t l_layer, std::uint64_t seed = 0);

// Survival function of the chi-square distribution: P(X > stat) for X with
// `dof` degrees of freedom, via the regularized upper incomplete gamma
// function.  Used to score sampling-frequency goodness-of-fit.
double chi_square_sf(double stat, double dof);

}  // namespace ipr
