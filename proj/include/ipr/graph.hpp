#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ipr/tensor.hpp"

namespace ipr {

// Undirected attributed graph.  Edges are stored once with u < v, sorted
// lexicographically, and mirrored into a CSR adjacency structure whose
// neighbor lists are sorted.  Node features are an [n x d] tensor; edge
// features, when present, align with the stored edge order.
struct AttributedGraph {
  std::int64_t n = 0;
  std::vector<std::pair<std::int32_t, std::int32_t>> edges;
  Tensor features;                         // [n x d]
  std::optional<Tensor> edge_features;     // [|E| x d_e]
  std::optional<std::vector<double>> label; // task target: scalar or vector

  // CSR adjacency over both directions.
  std::vector<std::int64_t> adj_offsets;   // size n+1
  std::vector<std::int32_t> adj;           // sorted per node

  AttributedGraph() = default;
  AttributedGraph(std::int64_t n, std::vector<std::pair<std::int32_t, std::int32_t>> edges,
                  Tensor features, std::optional<Tensor> edge_features = std::nullopt,
                  std::optional<std::vector<double>> label = std::nullopt);

  std::int64_t edge_count() const { return static_cast<std::int64_t>(edges.size()); }
  std::int64_t feature_dim() const { return features.rank() == 2 ? features.cols() : 0; }
  std::int64_t degree(std::int64_t v) const;
};

// Sorted neighbor ids of v.  v outside [0, n) -> error.
std::vector<std::int32_t> neighbors(const AttributedGraph& g, std::int64_t v);

// Subgraph induced by `nodes` (must be sorted, distinct, in range) together
// with the old->new index map for the kept nodes.  Node features, internal
// edges, their edge features, and the label are carried over.
struct InducedSubgraph {
  AttributedGraph graph;
  std::vector<std::int32_t> old_to_new;  // size g.n, -1 for dropped nodes
  std::vector<std::int32_t> kept;        // new->old
};
InducedSubgraph induced_subgraph(const AttributedGraph& g, const std::vector<std::int32_t>& nodes);

// Disjoint union a + b; features are stacked (dimensions must match), labels
// are dropped.  Used for paired refinement runs and batching helpers.
AttributedGraph disjoint_union(const AttributedGraph& a, const AttributedGraph& b);

// Dense combinatorial Laplacian D - A as an [n x n] tensor.
Tensor laplacian(const AttributedGraph& g);

// Connected components: per-node component id (0-based, in discovery order
// from node 0) plus the component count.
std::pair<std::vector<std::int32_t>, std::int64_t> connected_components(const AttributedGraph& g);

// Row-wise exactly-k assignment of n nodes to m virtual nodes: row v holds
// the k distinct, sorted virtual ids node v attaches to.
struct AssignmentMatrix {
  std::int64_t n = 0;
  std::int64_t m = 0;
  std::int64_t k = 0;
  std::vector<std::vector<std::int32_t>> rows;

  AssignmentMatrix() = default;
  AssignmentMatrix(std::int64_t n, std::int64_t m, std::int64_t k,
                   std::vector<std::vector<std::int32_t>> rows);
};

// For each virtual node c, the sorted list of nodes assigned to it.
std::vector<std::vector<std::int32_t>> inverse_assignment(const AssignmentMatrix& a);

// JSON graph object: {"n": int, "edges": [[u,v],...], "x": [[...]],
// "edge_attr": [[...]] (optional), "y": number | [numbers] (optional)}.
// This is the only ingestion path for external graph corpora.
AttributedGraph graph_from_json(const std::string& json_text);
std::string graph_to_json(const AttributedGraph& g);

// JSONL: one graph object per non-empty line.  Parse or validation failures
// report the 1-based line number.
std::vector<AttributedGraph> load_jsonl(const std::string& path);
void save_jsonl(const std::string& path, const std::vector<AttributedGraph>& graphs);

}  // namespace ipr
