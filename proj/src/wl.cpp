#include "ipr/wl.hpp"

#include <algorithm>
#include <stdexcept>

namespace ipr {
namespace wl {

namespace {

// Assign contiguous ids to a set of refinement keys by lexicographic rank.
// Ranking (rather than first-seen scan order) keeps ids independent of node
// numbering, so equal multisets of keys always produce equal colorings.
std::vector<std::int32_t> canonicalize(std::vector<std::vector<std::int32_t>>& keys) {
  std::vector<std::vector<std::int32_t>> sorted = keys;
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  std::vector<std::int32_t> out(keys.size());
  for (std::size_t v = 0; v < keys.size(); ++v) {
    auto it = std::lower_bound(sorted.begin(), sorted.end(), keys[v]);
    out[v] = static_cast<std::int32_t>(it - sorted.begin());
  }
  return out;
}

}  // namespace

std::map<std::int32_t, std::int64_t> Coloring::histogram() const {
  std::map<std::int32_t, std::int64_t> h;
  for (std::int32_t c : colors) ++h[c];
  return h;
}

std::int32_t Coloring::class_count() const {
  std::int32_t mx = -1;
  for (std::int32_t c : colors) mx = std::max(mx, c);
  return mx + 1;
}

Coloring initial_coloring(const AttributedGraph& g) {
  Coloring c;
  c.colors.assign(static_cast<std::size_t>(g.n), 0);
  c.round = 0;
  return c;
}

Coloring initial_coloring(const AttributedGraph& g, const std::vector<std::int64_t>& labels) {
  if (static_cast<std::int64_t>(labels.size()) != g.n) {
    throw std::invalid_argument("initial coloring got " + std::to_string(labels.size()) +
                                " labels for " + std::to_string(g.n) + " nodes");
  }
  std::vector<std::int64_t> sorted = labels;
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  Coloring c;
  c.colors.resize(labels.size());
  for (std::size_t v = 0; v < labels.size(); ++v) {
    auto it = std::lower_bound(sorted.begin(), sorted.end(), labels[v]);
    c.colors[v] = static_cast<std::int32_t>(it - sorted.begin());
  }
  c.round = 0;
  return c;
}

Coloring refine_step(const AttributedGraph& g, const Coloring& c) {
  if (static_cast<std::int64_t>(c.colors.size()) != g.n) {
    throw std::invalid_argument("coloring covers " + std::to_string(c.colors.size()) +
                                " nodes, graph has " + std::to_string(g.n));
  }
  std::vector<std::vector<std::int32_t>> keys(static_cast<std::size_t>(g.n));
  for (std::int64_t v = 0; v < g.n; ++v) {
    auto& key = keys[static_cast<std::size_t>(v)];
    key.reserve(static_cast<std::size_t>(g.degree(v)) + 1);
    key.push_back(c.colors[static_cast<std::size_t>(v)]);
    for (std::int64_t i = g.adj_offsets[static_cast<std::size_t>(v)];
         i < g.adj_offsets[static_cast<std::size_t>(v) + 1]; ++i) {
      key.push_back(c.colors[static_cast<std::size_t>(g.adj[static_cast<std::size_t>(i)])]);
    }
    std::sort(key.begin() + 1, key.end());
  }
  Coloring out;
  out.colors = canonicalize(keys);
  out.round = c.round + 1;
  return out;
}

Coloring stable_coloring(const AttributedGraph& g, const Coloring& init) {
  Coloring cur = init;
  // Refinement only splits classes, so an unchanged class count means the
  // partition (and hence every later round) is fixed.
  while (true) {
    Coloring next = refine_step(g, cur);
    if (next.class_count() == cur.class_count()) {
      next.round = cur.round;  // the last round did not change the partition
      // Keep the refined (canonical) ids but report the stabilization round.
      return next;
    }
    cur = std::move(next);
  }
}

Coloring stable_coloring(const AttributedGraph& g) { return stable_coloring(g, initial_coloring(g)); }

bool wl_distinguishable(const AttributedGraph& a, const AttributedGraph& b) {
  if (a.n != b.n) return true;
  if (a.n == 0) return false;
  // A shared refinement run keeps color ids comparable across the two sides.
  AttributedGraph u = disjoint_union(a, b);
  Coloring stable = stable_coloring(u);
  std::map<std::int32_t, std::int64_t> ha, hb;
  for (std::int64_t v = 0; v < a.n; ++v) ++ha[stable.colors[static_cast<std::size_t>(v)]];
  for (std::int64_t v = a.n; v < u.n; ++v) ++hb[stable.colors[static_cast<std::size_t>(v)]];
  return ha != hb;
}

std::vector<InducedSubgraph> color_induced_subgraphs(const AttributedGraph& g, const Coloring& c) {
  if (static_cast<std::int64_t>(c.colors.size()) != g.n) {
    throw std::invalid_argument("coloring covers " + std::to_string(c.colors.size()) +
                                " nodes, graph has " + std::to_string(g.n));
  }
  std::vector<std::vector<std::int32_t>> classes(static_cast<std::size_t>(c.class_count()));
  for (std::int64_t v = 0; v < g.n; ++v) {
    classes[static_cast<std::size_t>(c.colors[static_cast<std::size_t>(v)])].push_back(static_cast<std::int32_t>(v));
  }
  std::vector<InducedSubgraph> out;
  out.reserve(classes.size());
  for (const auto& nodes : classes) out.push_back(induced_subgraph(g, nodes));
  return out;
}

}  // namespace wl
}  // namespace ipr
