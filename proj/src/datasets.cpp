#include "ipr/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

#include "ipr/rng.hpp"

namespace ipr {

namespace {

constexpr std::uint64_t kLeafcountStream = 0x6c656166ULL;
constexpr std::uint64_t kMatchStream = 0x6d617463ULL;
constexpr std::uint64_t kCslStream = 0x63736cULL;
constexpr std::uint64_t kSplitStream = 0x73706c69ULL;

// Heap-indexed complete binary tree: node i has children 2i+1, 2i+2.
std::vector<std::pair<std::int32_t, std::int32_t>> binary_tree_edges(std::int64_t depth) {
  const std::int64_t internal = (1LL << depth) - 1;
  std::vector<std::pair<std::int32_t, std::int32_t>> edges;
  edges.reserve(static_cast<std::size_t>(2 * internal));
  for (std::int32_t i = 0; i < internal; ++i) {
    edges.emplace_back(i, 2 * i + 1);
    edges.emplace_back(i, 2 * i + 2);
  }
  return edges;
}

void shuffle_indices(std::vector<std::int64_t>& idx, Rng& rng) {
  for (std::int64_t i = static_cast<std::int64_t>(idx.size()) - 1; i > 0; --i) {
    const std::int64_t j =
        static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(i + 1)));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
}

}  // namespace

std::vector<AttributedGraph> gen_trees_leafcount(std::int64_t depth, std::int64_t n,
                                                 std::uint64_t seed) {
  if (depth < 2 || depth > 6) {
    throw std::invalid_argument("leafcount depth must be in [2, 6], got " + std::to_string(depth));
  }
  if (n < 1) throw std::invalid_argument("need at least one instance");
  const std::int64_t leaves = 1LL << depth;
  const std::int64_t nodes = 2 * leaves - 1;
  const std::int64_t first_leaf = leaves - 1;
  const auto edges = binary_tree_edges(depth);

  std::vector<AttributedGraph> out;
  out.reserve(static_cast<std::size_t>(n));
  for (std::int64_t inst = 0; inst < n; ++inst) {
    Rng rng = Rng::derive(seed, {kLeafcountStream, static_cast<std::uint64_t>(inst)});
    // draw the target class first so the corpus is balanced across [0, leaves]
    const std::int64_t target =
        static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(leaves + 1)));
    std::vector<std::int64_t> leaf_order(static_cast<std::size_t>(leaves));
    std::iota(leaf_order.begin(), leaf_order.end(), first_leaf);
    shuffle_indices(leaf_order, rng);

    Tensor feats({nodes, 3});
    for (std::int64_t v = 0; v < first_leaf; ++v) feats.mutable_data()[v * 3 + 0] = 1.0;
    for (std::int64_t j = 0; j < leaves; ++j) {
      const std::int64_t v = leaf_order[static_cast<std::size_t>(j)];
      feats.mutable_data()[v * 3 + (j < target ? 2 : 1)] = 1.0;
    }
    out.emplace_back(nodes, edges, feats, std::nullopt,
                     std::vector<double>{static_cast<double>(target)});
  }
  return out;
}

std::vector<AttributedGraph> gen_trees_neighboursmatch(std::int64_t depth, std::int64_t n,
                                                       std::uint64_t seed) {
  if (depth < 2 || depth > 7) {
    throw std::invalid_argument("neighboursmatch depth must be in [2, 7], got " +
                                std::to_string(depth));
  }
  if (n < 1) throw std::invalid_argument("need at least one instance");
  const std::int64_t leaves = 1LL << depth;
  const std::int64_t nodes = 2 * leaves - 1;
  const std::int64_t first_leaf = leaves - 1;
  const auto edges = binary_tree_edges(depth);
  const std::int64_t marker_width = leaves + 1;  // [0, leaves) plus "none"
  const std::int64_t label_width = leaves + 1;
  const std::int64_t d_in = marker_width + label_width;

  std::vector<AttributedGraph> out;
  out.reserve(static_cast<std::size_t>(n));
  for (std::int64_t inst = 0; inst < n; ++inst) {
    Rng rng = Rng::derive(seed, {kMatchStream, static_cast<std::uint64_t>(inst)});
    std::vector<std::int64_t> markers(static_cast<std::size_t>(leaves));
    std::iota(markers.begin(), markers.end(), 0);
    shuffle_indices(markers, rng);
    std::vector<std::int64_t> labels(static_cast<std::size_t>(leaves));
    std::iota(labels.begin(), labels.end(), 0);
    shuffle_indices(labels, rng);
    const std::int64_t root_marker =
        static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(leaves)));

    Tensor feats({nodes, d_in});
    auto set_marker = [&](std::int64_t v, std::int64_t marker) {
      feats.mutable_data()[v * d_in + marker] = 1.0;
    };
    auto set_label = [&](std::int64_t v, std::int64_t label) {
      feats.mutable_data()[v * d_in + marker_width + label] = 1.0;
    };
    set_marker(0, root_marker);
    set_label(0, leaves);  // "none"
    for (std::int64_t v = 1; v < first_leaf; ++v) {
      set_marker(v, leaves);
      set_label(v, leaves);
    }
    double target = -1.0;
    for (std::int64_t j = 0; j < leaves; ++j) {
      const std::int64_t v = first_leaf + j;
      set_marker(v, markers[static_cast<std::size_t>(j)]);
      set_label(v, labels[static_cast<std::size_t>(j)]);
      if (markers[static_cast<std::size_t>(j)] == root_marker) {
        target = static_cast<double>(labels[static_cast<std::size_t>(j)]);
      }
    }
    out.emplace_back(nodes, edges, feats, std::nullopt, std::vector<double>{target});
  }
  return out;
}

AttributedGraph csl_graph(std::int64_t n_nodes, std::int64_t skip) {
  if (n_nodes < 5) throw std::invalid_argument("CSL needs at least 5 nodes");
  if (skip < 2 || skip > n_nodes / 2 - (n_nodes % 2 == 0 ? 1 : 0)) {
    throw std::invalid_argument("CSL skip must satisfy 2 <= skip <= floor((n-1)/2), got " +
                                std::to_string(skip));
  }
  std::vector<std::pair<std::int32_t, std::int32_t>> edges;
  edges.reserve(static_cast<std::size_t>(2 * n_nodes));
  for (std::int32_t i = 0; i < n_nodes; ++i) {
    edges.emplace_back(i, static_cast<std::int32_t>((i + 1) % n_nodes));
    edges.emplace_back(i, static_cast<std::int32_t>((i + skip) % n_nodes));
  }
  for (auto& [u, v] : edges) {
    if (u > v) std::swap(u, v);
  }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  Tensor feats({n_nodes, 1}, std::vector<double>(static_cast<std::size_t>(n_nodes), 1.0));
  return AttributedGraph(n_nodes, std::move(edges), feats);
}

std::vector<AttributedGraph> gen_csl(std::int64_t per_class, std::uint64_t seed,
                                     std::int64_t n_nodes,
                                     const std::vector<std::int64_t>& skips) {
  if (per_class < 1) throw std::invalid_argument("per_class must be positive");
  for (std::size_t i = 0; i < skips.size(); ++i) {
    for (std::size_t j = i + 1; j < skips.size(); ++j) {
      if (skips[i] == skips[j]) throw std::invalid_argument("duplicate CSL skip");
    }
  }
  std::vector<AttributedGraph> out;
  out.reserve(skips.size() * static_cast<std::size_t>(per_class));
  for (std::size_t cls = 0; cls < skips.size(); ++cls) {
    const AttributedGraph base = csl_graph(n_nodes, skips[cls]);
    for (std::int64_t copy = 0; copy < per_class; ++copy) {
      Rng rng = Rng::derive(seed, {kCslStream, static_cast<std::uint64_t>(cls),
                                   static_cast<std::uint64_t>(copy)});
      std::vector<std::int64_t> pi(static_cast<std::size_t>(n_nodes));
      std::iota(pi.begin(), pi.end(), 0);
      shuffle_indices(pi, rng);
      std::vector<std::pair<std::int32_t, std::int32_t>> edges;
      edges.reserve(base.edges.size());
      for (auto [u, v] : base.edges) {
        edges.emplace_back(static_cast<std::int32_t>(pi[static_cast<std::size_t>(u)]),
                           static_cast<std::int32_t>(pi[static_cast<std::size_t>(v)]));
      }
      Tensor feats({n_nodes, 1}, std::vector<double>(static_cast<std::size_t>(n_nodes), 1.0));
      out.emplace_back(n_nodes, std::move(edges), feats, std::nullopt,
                       std::vector<double>{static_cast<double>(cls)});
    }
  }
  return out;
}

std::vector<AttributedGraph> gen_wl_pairs(const std::string& family, std::int64_t size) {
  auto cycle_edges = [](std::int64_t n, std::int32_t base) {
    std::vector<std::pair<std::int32_t, std::int32_t>> edges;
    for (std::int32_t i = 0; i < n; ++i) {
      edges.emplace_back(static_cast<std::int32_t>(base + i),
                         static_cast<std::int32_t>(base + (i + 1) % n));
    }
    return edges;
  };
  if (family == "cycle_split") {
    if (size % 2 != 0) throw std::invalid_argument("cycle_split size must be even");
    if (size < 6) {
      throw std::invalid_argument("cycle_split needs size >= 6 (half-cycles below C_3 degenerate)");
    }
    Tensor feats({size, 1}, std::vector<double>(static_cast<std::size_t>(size), 1.0));
    AttributedGraph whole(size, cycle_edges(size, 0), feats, std::nullopt,
                          std::vector<double>{0.0});
    auto half = cycle_edges(size / 2, 0);
    auto other = cycle_edges(size / 2, static_cast<std::int32_t>(size / 2));
    half.insert(half.end(), other.begin(), other.end());
    AttributedGraph split(size, std::move(half), feats, std::nullopt, std::vector<double>{1.0});
    return {whole, split};
  }
  if (family == "csl_pair") {
    if (size < 10) throw std::invalid_argument("csl_pair needs size >= 10");
    AttributedGraph a = csl_graph(size, 2);
    AttributedGraph b = csl_graph(size, 3);
    a.label = std::vector<double>{0.0};
    b.label = std::vector<double>{1.0};
    return {a, b};
  }
  throw std::invalid_argument("unknown pair family '" + family +
                              "' (want cycle_split|csl_pair)");
}

namespace {

std::map<double, std::vector<std::int64_t>> strata(const std::vector<AttributedGraph>& data) {
  std::map<double, std::vector<std::int64_t>> by_class;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double key = data[i].label && !data[i].label->empty() ? (*data[i].label)[0] : 0.0;
    by_class[key].push_back(static_cast<std::int64_t>(i));
  }
  return by_class;
}

}  // namespace

SplitIndices stratified_split(const std::vector<AttributedGraph>& data, double train_frac,
                              double valid_frac, double test_frac, std::uint64_t seed) {
  if (data.empty()) throw std::invalid_argument("cannot split an empty dataset");
  if (train_frac < 0 || valid_frac < 0 || test_frac < 0 ||
      std::abs(train_frac + valid_frac + test_frac - 1.0) > 1e-9) {
    throw std::invalid_argument("split fractions must be non-negative and sum to 1");
  }
  SplitIndices split;
  std::uint64_t stratum = 0;
  for (auto& [key, idx] : strata(data)) {
    std::vector<std::int64_t> order = idx;
    Rng rng = Rng::derive(seed, {kSplitStream, stratum++});
    shuffle_indices(order, rng);
    const std::int64_t c = static_cast<std::int64_t>(order.size());
    const std::int64_t n_train = static_cast<std::int64_t>(std::llround(train_frac * c));
    const std::int64_t n_valid =
        std::min<std::int64_t>(c - n_train, static_cast<std::int64_t>(std::llround(valid_frac * c)));
    for (std::int64_t i = 0; i < c; ++i) {
      if (i < n_train) {
        split.train.push_back(order[static_cast<std::size_t>(i)]);
      } else if (i < n_train + n_valid) {
        split.valid.push_back(order[static_cast<std::size_t>(i)]);
      } else {
        split.test.push_back(order[static_cast<std::size_t>(i)]);
      }
    }
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.valid.begin(), split.valid.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

std::vector<SplitIndices> kfold_splits(const std::vector<AttributedGraph>& data,
                                       std::int64_t folds, std::uint64_t seed) {
  if (folds < 2) throw std::invalid_argument("k-fold needs at least 2 folds");
  if (static_cast<std::int64_t>(data.size()) < folds) {
    throw std::invalid_argument("fewer graphs than folds");
  }
  std::vector<std::vector<std::int64_t>> fold_members(static_cast<std::size_t>(folds));
  std::uint64_t stratum = 0;
  for (auto& [key, idx] : strata(data)) {
    std::vector<std::int64_t> order = idx;
    Rng rng = Rng::derive(seed, {kSplitStream, 0xf01dULL, stratum++});
    shuffle_indices(order, rng);
    for (std::size_t i = 0; i < order.size(); ++i) {
      fold_members[i % static_cast<std::size_t>(folds)].push_back(order[i]);
    }
  }
  std::vector<SplitIndices> out(static_cast<std::size_t>(folds));
  for (std::int64_t f = 0; f < folds; ++f) {
    for (std::int64_t g = 0; g < folds; ++g) {
      auto& dst = g == f ? out[static_cast<std::size_t>(f)].test
                         : out[static_cast<std::size_t>(f)].train;
      dst.insert(dst.end(), fold_members[static_cast<std::size_t>(g)].begin(),
                 fold_members[static_cast<std::size_t>(g)].end());
    }
    std::sort(out[static_cast<std::size_t>(f)].train.begin(),
              out[static_cast<std::size_t>(f)].train.end());
    std::sort(out[static_cast<std::size_t>(f)].test.begin(),
              out[static_cast<std::size_t>(f)].test.end());
  }
  return out;
}

std::vector<AttributedGraph> subset(const std::vector<AttributedGraph>& data,
                                    const std::vector<std::int64_t>& indices) {
  std::vector<AttributedGraph> out;
  out.reserve(indices.size());
  for (std::int64_t i : indices) {
    if (i < 0 || i >= static_cast<std::int64_t>(data.size())) {
      throw std::out_of_range("subset index " + std::to_string(i) + " out of range");
    }
    out.push_back(data[static_cast<std::size_t>(i)]);
  }
  return out;
}

}  // namespace ipr
