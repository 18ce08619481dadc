#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ipr/graph.hpp"

namespace ipr {

// Synthetic corpora for the desk-scale experiments.  All generators are
// deterministic in their seed; labels ride on AttributedGraph::label.

// Complete binary trees of the given depth (2^(depth+1) - 1 nodes, root at
// index 0).  Each leaf carries a uniform binary mark, internal nodes a null
// mark; features one-hot {internal, leaf-0, leaf-1} (d_in = 3).  The graph
// target is the number of 1-marked leaves, a class in [0, 2^depth].  Targets
// are sampled uniformly so classes stay balanced where feasible.
std::vector<AttributedGraph> gen_trees_leafcount(std::int64_t depth, std::int64_t n,
                                                 std::uint64_t seed);

// The neighbors-match construction: a complete binary tree whose 2^depth
// leaves carry (class label, marker) pairs, the markers a permutation of
// [0, 2^depth); the root carries a marker too, and the target is the class
// label of the unique leaf whose marker equals the root's.  Features are the
// concatenation of a marker one-hot ([0, L) plus "none") and a label one-hot
// ([0, L) plus "none"), d_in = 2^(depth+1) + 2; out_dim = 2^depth.
std::vector<AttributedGraph> gen_trees_neighboursmatch(std::int64_t depth, std::int64_t n,
                                                       std::uint64_t seed);

// One circular skip-link graph C(n_nodes, skip): cycle edges (i, i+1) plus
// skip edges (i, i+skip), all mod n_nodes.  4-regular for 2 <= skip <= n/2-1.
AttributedGraph csl_graph(std::int64_t n_nodes, std::int64_t skip);

// The CSL classification corpus: per_class node-permuted copies of
// C(n_nodes, R) for each skip R, labeled by skip class.  The standard
// protocol is n_nodes = 41, ten skips, 15 copies -> 150 graphs.
std::vector<AttributedGraph> gen_csl(
    std::int64_t per_class, std::uint64_t seed, std::int64_t n_nodes = 41,
    const std::vector<std::int64_t>& skips = {2, 3, 4, 5, 6, 9, 11, 12, 13, 16});

// Non-isomorphic, 1-WL-indistinguishable labeled pairs.
//   cycle_split: (C_size, two disjoint C_{size/2}) labeled 0/1; size even, >= 6
//   csl_pair:    (C(size, 2), C(size, 3)) labeled 0/1; size >= 10
std::vector<AttributedGraph> gen_wl_pairs(const std::string& family, std::int64_t size);

// Index-level splits.  Stratification keys off label[0] (graphs without a
// label fall into one stratum).
struct SplitIndices {
  std::vector<std::int64_t> train;
  std::vector<std::int64_t> valid;
  std::vector<std::int64_t> test;
};

// Shuffled, per-class proportional split; fractions must sum to 1.
SplitIndices stratified_split(const std::vector<AttributedGraph>& data, double train_frac,
                              double valid_frac, double test_frac, std::uint64_t seed);

// Stratified k-fold cross-validation: element i holds fold i as test and the
// rest as train (valid left empty).
std::vector<SplitIndices> kfold_splits(const std::vector<AttributedGraph>& data,
                                       std::int64_t folds, std::uint64_t seed);

std::vector<AttributedGraph> subset(const std::vector<AttributedGraph>& data,
                                    const std::vector<std::int64_t>& indices);

}  // namespace ipr
