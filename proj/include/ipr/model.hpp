#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ipr/exactk.hpp"
#include "ipr/graph.hpp"
#include "ipr/param_store.hpp"
#include "ipr/rng.hpp"
#include "ipr/tape.hpp"
#include "ipr/tensor.hpp"

namespace ipr {

enum class Agg { sum, mean, max };
enum class VirtualInit { subgraph_mpnn, random, identity };
// Graph-level readout: pooled node states, pooled virtual states, both
// concatenated, or the state of node 0 (generators expose tree roots there).
enum class ReadoutSource { nodes, virtual_nodes, both, root };

// Forward flavor: `sampled` draws discrete assignments with straight-through
// gradients; `relaxed` substitutes the smooth marginal matrix mu(theta) for
// every sample, making the whole pipeline differentiable end to end.  The
// relaxed path exists for gradient diagnostics only and requires sum-style
// node aggregation (agg_nodes == sum, agg_distribute in {sum, mean}).
enum class ForwardMode { sampled, relaxed };

Agg agg_from_string(const std::string& s);
std::string agg_to_string(Agg a);
VirtualInit virtual_init_from_string(const std::string& s);
std::string virtual_init_to_string(VirtualInit v);
ReadoutSource readout_from_string(const std::string& s);
std::string readout_to_string(ReadoutSource r);

// Hyperparameters of the hierarchical rewiring model.
//
// The network has two halves.  The upstream half is a GIN-style MPNN over the
// input graph that emits an [n x m] matrix of assignment logits ("priors").
// Each node then attaches to exactly k of the m virtual nodes, drawn from the
// conditioned product-Bernoulli distribution, q times.  The downstream half
// runs layers_down rounds of three-phase message passing per drawn
// assignment: node states pool into virtual nodes, virtual nodes exchange
// messages over their complete graph, and virtual states redistribute to the
// nodes alongside ordinary neighbor messages.  Predictions from the q samples
// are averaged.
//
// ds_enabled=false removes the virtual hierarchy entirely (no priors, no
// sampling, no distribute term), leaving the plain residual MPNN - the
// baseline the diagnostics compare against.
struct ModelSpec {
  std::int64_t d_in = 1;    // node feature width (set from the dataset)
  std::int64_t d_edge = 0;  // edge feature width, 0 when absent
  std::int64_t d_hidden_up = 16;
  std::int64_t layers_up = 1;
  std::int64_t d_hidden_down = 16;
  std::int64_t d_hidden_virtual = 32;
  std::int64_t layers_down = 1;
  std::int64_t m = 2;  // virtual nodes
  std::int64_t k = 1;  // attachments per node
  std::int64_t q = 1;  // assignment samples
  std::int64_t out_dim = 1;
  VirtualInit virtual_init = VirtualInit::identity;
  ReadoutSource readout_source = ReadoutSource::nodes;
  Agg agg_nodes = Agg::sum;       // AGGn: pooling node states into virtual nodes
  Agg agg_virtual = Agg::sum;     // AGGc: pooling the other virtual nodes' messages
  Agg agg_neighbors = Agg::sum;   // AGG: downstream neighborhood aggregation
  Agg agg_distribute = Agg::sum;  // DS: pooling a node's k virtual states
  Agg readout_agg = Agg::sum;
  // Normalize every update MLP's output rows (learned gain/bias).  Keeps deep
  // sum-aggregated stacks from blowing up activation scale layer over layer.
  bool layer_norm = false;
  bool ds_enabled = true;

  void validate() const;  // invariant violations -> std::invalid_argument
};

// Node/virtual embeddings after some number of downstream layers.
struct HiddenState {
  Tensor h;  // [n x d_hidden_down]
  Tensor g;  // [m x d_hidden_virtual]
  std::int64_t layer = 0;
};

// Create every parameter the spec calls for: weights Kaiming-uniform with
// fan-in scaling from a per-name derived stream, biases zero.  Deterministic
// in (spec, seed) and independent of creation order.
void init_params(ParameterStore& store, const ModelSpec& spec, std::uint64_t seed);

// Assignment logits theta [n x m] from the upstream MPNN: layers_up GIN
// layers (update MLP((1+eps) h_v + sum of neighbors), eps = 0) followed by a
// linear head; with layers_up = 0, a per-node MLP on the raw features feeds
// the head directly.
Tensor upstream_priors(Tape& tape, const AttributedGraph& g, const ModelSpec& spec,
                       ParameterStore& params);

// Initial virtual states [m x d_hidden_virtual].  subgraph_mpnn runs one
// GIN layer over each assignment-induced subgraph and sum-pools (empty
// subgraph -> zero row); random draws standard normals from rng; identity
// returns a learned row per virtual node, the projection of its one-hot id.
Tensor init_virtual(Tape& tape, const AttributedGraph& g, const AssignmentMatrix& assign,
                    const ModelSpec& spec, ParameterStore& params, Rng& rng);

// Phase 1: pool node states into per-virtual-node messages and transform:
// relu(W * AGGn({h_v : v assigned to c}) + b).  Empty assignee sets pool to
// the zero vector.  Output [m x d_hidden_virtual].
Tensor aggregate_to_virtual(Tape& tape, const HiddenState& state, const AssignmentMatrix& assign,
                            const ModelSpec& spec, ParameterStore& params, std::int64_t layer = 0);

// Phase 2: each virtual node updates from (previous state, own pooled
// message, AGGc of the other virtual nodes' pooled messages), concatenated
// through an MLP.  With m = 1 the others-aggregate is the zero vector.
Tensor update_virtual(Tape& tape, const HiddenState& state, const Tensor& pooled,
                      const ModelSpec& spec, ParameterStore& params, std::int64_t layer = 0);

// Phase 3: h_v' = h_v + MLP(AGG(neighbor states) + W_ds * DS(assigned virtual
// states) + b_ds); the residual carries the GIN self term.  With ds_enabled
// false the virtual term drops and this is a plain residual MPNN layer.
Tensor update_original(Tape& tape, const HiddenState& state, const Tensor& g_new,
                       const AttributedGraph& graph, const AssignmentMatrix& assign,
                       const ModelSpec& spec, ParameterStore& params, std::int64_t layer = 0);

struct ForwardResult {
  Tensor prediction;     // [B x out_dim]: per-graph mean over the q samples
  Tensor priors;         // [sum n_b x m] assignment logits (empty when ds_enabled is false)
  Tensor sample_logits;  // [q*B x out_dim], sample-major blocks of B graphs
  std::vector<AssignmentMatrix> assignments;  // size q*B, index s*B + b; empty in relaxed mode
};

// Run the model on a batch of graphs as one disjoint union, replicated q
// times so every sample of every graph flows through the same fused tensor
// ops.  Sampling streams derive from (seed, graph position in batch, sample,
// row), so results are reproducible given (params, seed).
ForwardResult forward_batch(Tape& tape, const std::vector<const AttributedGraph*>& graphs,
                            const ModelSpec& spec, ParameterStore& params, std::uint64_t seed,
                            ForwardMode mode = ForwardMode::sampled);

ForwardResult forward(Tape& tape, const AttributedGraph& g, const ModelSpec& spec,
                      ParameterStore& params, std::uint64_t seed,
                      ForwardMode mode = ForwardMode::sampled);

// Same pipeline, but the assignment logits are supplied by the caller
// (tape-bound or constant) instead of the upstream model.  Diagnostics use
// this to probe d loss / d theta in isolation.
ForwardResult forward_from_priors(Tape& tape, const std::vector<const AttributedGraph*>& graphs,
                                  const Tensor& priors, const ModelSpec& spec,
                                  ParameterStore& params, std::uint64_t seed,
                                  ForwardMode mode = ForwardMode::sampled);

// Exact count of pairwise message operations in one downstream layer:
// 2|E| neighbor messages + n*k aggregation edges + m(m-1) virtual-virtual
// messages + n*k distribution edges.
std::int64_t count_message_ops(const AttributedGraph& g, const ModelSpec& spec);

}  // namespace ipr
