#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "ipr/graph.hpp"

namespace ipr {
namespace wl {

// Color refinement state.  Color ids are contiguous integers starting at 0,
// assigned canonically (lexicographic order of the refinement keys), which
// makes colorings and histograms invariant under node relabeling.
struct Coloring {
  std::vector<std::int32_t> colors;          // per node
  std::int64_t round = 0;                    // refinement rounds applied
  std::map<std::int32_t, std::int64_t> histogram() const;
  std::int32_t class_count() const;
};

// Uniform initial coloring (every node color 0).
Coloring initial_coloring(const AttributedGraph& g);
// Initial coloring canonicalized from per-node integer labels.
Coloring initial_coloring(const AttributedGraph& g, const std::vector<std::int64_t>& labels);

// One refinement round: the new color of v canonicalizes the pair
// (old color of v, sorted multiset of neighbor colors).
Coloring refine_step(const AttributedGraph& g, const Coloring& c);

// Refine until the partition stops changing.  Stable within at most n rounds.
Coloring stable_coloring(const AttributedGraph& g, const Coloring& init);
Coloring stable_coloring(const AttributedGraph& g);

// Whether 1-WL separates a and b: runs stable refinement on their disjoint
// union and compares the per-side color histograms.  Graphs of different
// order are trivially distinguishable.
bool wl_distinguishable(const AttributedGraph& a, const AttributedGraph& b);

// Subgraphs induced by each color class of a stable (or any) coloring,
// indexed by color id.
std::vector<InducedSubgraph> color_induced_subgraphs(const AttributedGraph& g, const Coloring& c);

}  // namespace wl
}  // namespace ipr
