#include "ipr/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>
#include <utility>

namespace ipr {

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

Reduce to_reduce(Agg a) {
  switch (a) {
    case Agg::sum: return Reduce::sum;
    case Agg::mean: return Reduce::mean;
    case Agg::max: return Reduce::max;
  }
  throw std::logic_error("unreachable aggregator");
}

// Binds each named parameter to the tape at most once per forward pass.
class ParamBinder {
 public:
  ParamBinder(Tape& tape, ParameterStore& store) : tape_(tape), store_(store) {}
  Tensor operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    Tensor leaf = store_.leaf(tape_, name);
    bound_.emplace(name, leaf);
    return leaf;
  }

 private:
  Tape& tape_;
  ParameterStore& store_;
  std::map<std::string, Tensor> bound_;
};

Tensor linear(ParamBinder& bind, const std::string& prefix, const Tensor& x) {
  return add_bias(matmul(x, bind(prefix + ".w")), bind(prefix + ".b"));
}

Tensor mlp2(ParamBinder& bind, const std::string& prefix, const Tensor& x) {
  Tensor hidden = relu(add_bias(matmul(x, bind(prefix + ".w1")), bind(prefix + ".b1")));
  return add_bias(matmul(hidden, bind(prefix + ".w2")), bind(prefix + ".b2"));
}

// Post-MLP row normalization when the spec asks for it, identity otherwise.
Tensor maybe_norm(ParamBinder& bind, const ModelSpec& spec, const std::string& prefix,
                  const Tensor& x) {
  if (!spec.layer_norm) return x;
  return layer_norm(x, bind(prefix + ".ln.g"), bind(prefix + ".ln.b"));
}

std::string layer_prefix(std::int64_t layer) { return "down.l" + std::to_string(layer); }

// Disjoint union of a batch with node-major directed adjacency, used as the
// single-copy substrate for the upstream pass and as the template the
// downstream pass replicates q times.
struct UnionGraph {
  std::int64_t B = 0;
  std::int64_t N = 0;
  std::int64_t E2 = 0;  // directed edges
  std::vector<std::int64_t> node_offset;  // size B+1
  Tensor features;                        // [N x d_in]
  std::vector<std::int64_t> adj_offsets;  // size N+1
  std::vector<std::int64_t> adj;          // global node ids, CSR order
  Tensor edge_features;                   // [E2 x d_edge] aligned with adj, when d_edge > 0
};

UnionGraph build_union(const std::vector<const AttributedGraph*>& graphs, const ModelSpec& spec) {
  if (graphs.empty()) throw std::invalid_argument("forward needs at least one graph");
  UnionGraph u;
  u.B = static_cast<std::int64_t>(graphs.size());
  u.node_offset.assign(1, 0);
  for (const AttributedGraph* g : graphs) {
    if (g->feature_dim() != spec.d_in) {
      throw std::invalid_argument("graph feature dim " + std::to_string(g->feature_dim()) +
                                  " does not match model d_in " + std::to_string(spec.d_in));
    }
    if (spec.d_edge > 0 && g->edge_count() > 0) {
      if (!g->edge_features || g->edge_features->cols() != spec.d_edge) {
        throw std::invalid_argument("model expects edge features of width " +
                                    std::to_string(spec.d_edge));
      }
    }
    u.node_offset.push_back(u.node_offset.back() + g->n);
    u.E2 += 2 * g->edge_count();
  }
  u.N = u.node_offset.back();

  std::vector<double> feats(static_cast<std::size_t>(u.N * spec.d_in));
  u.adj_offsets.assign(static_cast<std::size_t>(u.N + 1), 0);
  u.adj.reserve(static_cast<std::size_t>(u.E2));
  std::vector<double> efeats;
  if (spec.d_edge > 0) efeats.reserve(static_cast<std::size_t>(u.E2 * spec.d_edge));

  std::int64_t row = 0;
  for (std::int64_t b = 0; b < u.B; ++b) {
    const AttributedGraph& g = *graphs[static_cast<std::size_t>(b)];
    const std::int64_t base = u.node_offset[static_cast<std::size_t>(b)];
    std::copy(g.features.data(), g.features.data() + g.n * spec.d_in,
              feats.begin() + base * spec.d_in);
    // per-node edge index lookup for carrying edge features into CSR order
    std::map<std::pair<std::int32_t, std::int32_t>, std::int64_t> edge_index;
    if (spec.d_edge > 0) {
      for (std::size_t e = 0; e < g.edges.size(); ++e) {
        edge_index[g.edges[e]] = static_cast<std::int64_t>(e);
      }
    }
    for (std::int64_t v = 0; v < g.n; ++v, ++row) {
      for (std::int32_t nb : neighbors(g, v)) {
        u.adj.push_back(base + nb);
        if (spec.d_edge > 0) {
          auto key = std::make_pair(std::min<std::int32_t>(static_cast<std::int32_t>(v), nb),
                                    std::max<std::int32_t>(static_cast<std::int32_t>(v), nb));
          const std::int64_t e = edge_index.at(key);
          const double* ef = g.edge_features->data() + e * spec.d_edge;
          efeats.insert(efeats.end(), ef, ef + spec.d_edge);
        }
      }
      u.adj_offsets[static_cast<std::size_t>(row + 1)] = static_cast<std::int64_t>(u.adj.size());
    }
  }
  u.features = Tensor({u.N, spec.d_in}, std::move(feats));
  if (spec.d_edge > 0) u.edge_features = Tensor({u.E2, spec.d_edge}, std::move(efeats));
  return u;
}

std::vector<std::int32_t> iota32(std::int64_t n, std::int32_t base = 0) {
  std::vector<std::int32_t> v(static_cast<std::size_t>(n));
  std::iota(v.begin(), v.end(), base);
  return v;
}

// AGG over graph neighborhoods: gather neighbor rows in CSR order (optionally
// offset by embedded edge features) and reduce per node.
Tensor neighbor_aggregate(const Tensor& h, const std::vector<std::int64_t>& adj_offsets,
                          const std::vector<std::int64_t>& adj, Agg agg,
                          const Tensor* edge_embedded) {
  Tensor msgs = gather_rows(h, adj);
  if (edge_embedded != nullptr) msgs = add(msgs, *edge_embedded);
  RowGroups groups;
  groups.offsets = adj_offsets;
  groups.rows = iota32(static_cast<std::int64_t>(adj.size()));
  return group_reduce(msgs, groups, to_reduce(agg));
}

Tensor upstream_core(ParamBinder& bind, const UnionGraph& u, const ModelSpec& spec) {
  Tensor h = u.features;
  if (spec.layers_up == 0) {
    h = mlp2(bind, "up.embed", h);
  }
  for (std::int64_t i = 0; i < spec.layers_up; ++i) {
    const std::string prefix = "up.l" + std::to_string(i);
    Tensor edge_embedded;
    const Tensor* edge_ptr = nullptr;
    if (spec.d_edge > 0 && u.E2 > 0) {
      edge_embedded = matmul(u.edge_features, bind(prefix + ".edge.w"));
      edge_ptr = &edge_embedded;
    }
    Tensor neigh = neighbor_aggregate(h, u.adj_offsets, u.adj, Agg::sum, edge_ptr);
    h = maybe_norm(bind, spec, prefix, mlp2(bind, prefix, add(h, neigh)));
  }
  return linear(bind, "up.head", h);
}

// Block layout of the q-times-replicated union: block index blk = s*B + b for
// sample s and graph b; node rows live at s*N + node_offset[b] + v and
// virtual rows at blk*m + c.
struct BlockLayout {
  std::int64_t q = 1;
  std::int64_t B = 1;
  std::int64_t m = 1;
  std::int64_t N = 0;
  std::vector<std::int64_t> node_offset;

  std::int64_t blocks() const { return q * B; }
  std::int64_t node_base(std::int64_t blk) const {
    return (blk / B) * N + node_offset[static_cast<std::size_t>(blk % B)];
  }
  std::int64_t block_nodes(std::int64_t blk) const {
    const std::int64_t b = blk % B;
    return node_offset[static_cast<std::size_t>(b + 1)] - node_offset[static_cast<std::size_t>(b)];
  }
};

// Phase-1 pooling AGGn (before the learned transform).  Sum and mean ride the
// fused assignment matmul so gradients reach the sampled weights; max reduces
// over the discrete structure, so only the node states receive gradients.
Tensor pool_to_virtual(const Tensor& h, const std::vector<Tensor>& blocks,
                       const std::vector<AssignmentMatrix>& structures, const BlockLayout& lay,
                       Agg agg) {
  if (agg == Agg::sum || agg == Agg::mean) {
    Tensor pooled = assign_aggregate(blocks, h);
    if (agg == Agg::mean) {
      const std::int64_t d = pooled.cols();
      Tensor inv(pooled.shape());
      for (std::int64_t blk = 0; blk < lay.blocks(); ++blk) {
        const auto groups = inverse_assignment(structures[static_cast<std::size_t>(blk)]);
        for (std::int64_t c = 0; c < lay.m; ++c) {
          const double count = static_cast<double>(groups[static_cast<std::size_t>(c)].size());
          if (count == 0.0) continue;
          double* row = inv.mutable_data() + (blk * lay.m + c) * d;
          std::fill(row, row + d, 1.0 / count);
        }
      }
      pooled = mul(pooled, inv);
    }
    return pooled;
  }
  std::vector<std::vector<std::int32_t>> lists;
  lists.reserve(static_cast<std::size_t>(lay.blocks() * lay.m));
  for (std::int64_t blk = 0; blk < lay.blocks(); ++blk) {
    const auto groups = inverse_assignment(structures[static_cast<std::size_t>(blk)]);
    const std::int64_t base = lay.node_base(blk);
    for (std::int64_t c = 0; c < lay.m; ++c) {
      std::vector<std::int32_t> rows;
      rows.reserve(groups[static_cast<std::size_t>(c)].size());
      for (std::int32_t v : groups[static_cast<std::size_t>(c)]) {
        rows.push_back(static_cast<std::int32_t>(base + v));
      }
      lists.push_back(std::move(rows));
    }
  }
  return group_reduce(h, RowGroups::from_lists(lists), Reduce::max);
}

// DS pooling of a node's k assigned virtual states.
Tensor distribute_to_nodes(const Tensor& g, const std::vector<Tensor>& blocks,
                           const std::vector<AssignmentMatrix>& structures, const BlockLayout& lay,
                           std::int64_t k, Agg agg) {
  if (agg == Agg::sum || agg == Agg::mean) {
    Tensor dist = assign_distribute(blocks, g);
    if (agg == Agg::mean) dist = scale(dist, 1.0 / static_cast<double>(k));
    return dist;
  }
  std::vector<std::vector<std::int32_t>> lists;
  lists.reserve(static_cast<std::size_t>(lay.q * lay.N));
  for (std::int64_t blk = 0; blk < lay.blocks(); ++blk) {
    const AssignmentMatrix& a = structures[static_cast<std::size_t>(blk)];
    for (const auto& row : a.rows) {
      std::vector<std::int32_t> vrows;
      vrows.reserve(row.size());
      for (std::int32_t c : row) vrows.push_back(static_cast<std::int32_t>(blk * lay.m + c));
      lists.push_back(std::move(vrows));
    }
  }
  return group_reduce(g, RowGroups::from_lists(lists), Reduce::max);
}

// AGGc over the other virtual nodes of the same block.  The sum and mean
// variants subtract each row from its block total; with m = 1 that difference
// is exactly zero, the empty-multiset convention.
Tensor others_aggregate(const Tensor& gbar, const BlockLayout& lay, Agg agg) {
  if (agg == Agg::max) {
    std::vector<std::vector<std::int32_t>> lists;
    lists.reserve(static_cast<std::size_t>(lay.blocks() * lay.m));
    for (std::int64_t blk = 0; blk < lay.blocks(); ++blk) {
      for (std::int64_t c = 0; c < lay.m; ++c) {
        std::vector<std::int32_t> rows;
        for (std::int64_t j = 0; j < lay.m; ++j) {
          if (j != c) rows.push_back(static_cast<std::int32_t>(blk * lay.m + j));
        }
        lists.push_back(std::move(rows));
      }
    }
    return group_reduce(gbar, RowGroups::from_lists(lists), Reduce::max);
  }
  RowGroups block_groups;
  block_groups.offsets.resize(static_cast<std::size_t>(lay.blocks() + 1));
  for (std::int64_t blk = 0; blk <= lay.blocks(); ++blk) {
    block_groups.offsets[static_cast<std::size_t>(blk)] = blk * lay.m;
  }
  block_groups.rows = iota32(lay.blocks() * lay.m);
  Tensor totals = group_reduce(gbar, block_groups, Reduce::sum);  // [qB x d]
  std::vector<std::int64_t> tile(static_cast<std::size_t>(lay.blocks() * lay.m));
  for (std::int64_t r = 0; r < static_cast<std::int64_t>(tile.size()); ++r) {
    tile[static_cast<std::size_t>(r)] = r / lay.m;
  }
  Tensor others = sub(gather_rows(totals, tile), gbar);
  if (agg == Agg::mean && lay.m > 1) others = scale(others, 1.0 / static_cast<double>(lay.m - 1));
  return others;
}

Tensor constant_weights(const AssignmentMatrix& a) {
  Tensor w({a.n, a.m});
  for (std::int64_t v = 0; v < a.n; ++v) {
    for (std::int32_t c : a.rows[static_cast<std::size_t>(v)]) {
      w.mutable_data()[v * a.m + c] = 1.0;
    }
  }
  return w;
}

// One-layer GIN over an assignment-induced subgraph, sum-pooled; the
// subgraph_mpnn virtual initialization.
Tensor subgraph_summary(ParamBinder& bind, const AttributedGraph& g,
                        const std::vector<std::int32_t>& members, std::int64_t d_out) {
  if (members.empty()) return Tensor({1, d_out});
  const AttributedGraph sub = induced_subgraph(g, members).graph;
  std::vector<std::int64_t> adj(sub.adj.begin(), sub.adj.end());
  Tensor neigh = neighbor_aggregate(sub.features, sub.adj_offsets, adj, Agg::sum, nullptr);
  Tensor h = mlp2(bind, "vinit.l0", add(sub.features, neigh));
  RowGroups all;
  all.offsets = {0, sub.n};
  all.rows = iota32(sub.n);
  return group_reduce(h, all, Reduce::sum);  // [1 x d_out]
}

Tensor init_virtual_blocks(ParamBinder& bind, const std::vector<const AttributedGraph*>& graphs,
                           const std::vector<AssignmentMatrix>& structures, const BlockLayout& lay,
                           const ModelSpec& spec, std::uint64_t seed) {
  switch (spec.virtual_init) {
    case VirtualInit::identity: {
      std::vector<std::int64_t> tile(static_cast<std::size_t>(lay.blocks() * lay.m));
      for (std::size_t r = 0; r < tile.size(); ++r) {
        tile[r] = static_cast<std::int64_t>(r) % lay.m;
      }
      return gather_rows(bind("vinit.id.w"), tile);
    }
    case VirtualInit::random: {
      Tensor g0({lay.blocks() * lay.m, spec.d_hidden_virtual});
      for (std::int64_t blk = 0; blk < lay.blocks(); ++blk) {
        Rng rng = Rng::derive(seed, {0x76696e69ULL, static_cast<std::uint64_t>(blk)});
        double* row = g0.mutable_data() + blk * lay.m * spec.d_hidden_virtual;
        for (std::int64_t i = 0; i < lay.m * spec.d_hidden_virtual; ++i) row[i] = rng.next_normal();
      }
      return g0;
    }
    case VirtualInit::subgraph_mpnn: {
      std::vector<Tensor> rows;
      rows.reserve(static_cast<std::size_t>(lay.blocks() * lay.m));
      for (std::int64_t blk = 0; blk < lay.blocks(); ++blk) {
        const AttributedGraph& g = *graphs[static_cast<std::size_t>(blk % lay.B)];
        const auto groups = inverse_assignment(structures[static_cast<std::size_t>(blk)]);
        for (std::int64_t c = 0; c < lay.m; ++c) {
          rows.push_back(subgraph_summary(bind, g, groups[static_cast<std::size_t>(c)],
                                          spec.d_hidden_virtual));
        }
      }
      return concat_rows(rows);
    }
  }
  throw std::logic_error("unreachable virtual init mode");
}

Tensor readout_rows(const Tensor& h, const Tensor& g, const BlockLayout& lay,
                    const ModelSpec& spec) {
  auto node_pool = [&]() {
    std::vector<std::vector<std::int32_t>> lists;
    lists.reserve(static_cast<std::size_t>(lay.blocks()));
    for (std::int64_t blk = 0; blk < lay.blocks(); ++blk) {
      const std::int64_t base = lay.node_base(blk);
      lists.push_back(iota32(lay.block_nodes(blk), static_cast<std::int32_t>(base)));
    }
    return group_reduce(h, RowGroups::from_lists(lists), to_reduce(spec.readout_agg));
  };
  auto virtual_pool = [&]() {
    RowGroups groups;
    groups.offsets.resize(static_cast<std::size_t>(lay.blocks() + 1));
    for (std::int64_t blk = 0; blk <= lay.blocks(); ++blk) {
      groups.offsets[static_cast<std::size_t>(blk)] = blk * lay.m;
    }
    groups.rows = iota32(lay.blocks() * lay.m);
    return group_reduce(g, groups, to_reduce(spec.readout_agg));
  };
  switch (spec.readout_source) {
    case ReadoutSource::nodes: return node_pool();
    case ReadoutSource::virtual_nodes: return virtual_pool();
    case ReadoutSource::both: return concat_cols({node_pool(), virtual_pool()});
    case ReadoutSource::root: {
      std::vector<std::int64_t> roots(static_cast<std::size_t>(lay.blocks()));
      for (std::int64_t blk = 0; blk < lay.blocks(); ++blk) {
        roots[static_cast<std::size_t>(blk)] = lay.node_base(blk);
      }
      return gather_rows(h, roots);
    }
  }
  throw std::logic_error("unreachable readout source");
}

void create_weight(ParameterStore& store, const std::string& name, std::int64_t rows,
                   std::int64_t cols, std::uint64_t seed) {
  Rng rng = Rng::derive(seed, {fnv1a(name)});
  const double bound = std::sqrt(6.0 / static_cast<double>(rows));
  std::vector<double> values(static_cast<std::size_t>(rows * cols));
  for (double& v : values) v = rng.next_uniform(-bound, bound);
  store.create(name, {rows, cols}, values);
}

void create_bias(ParameterStore& store, const std::string& name, std::int64_t n) {
  store.create(name, {n}, std::vector<double>(static_cast<std::size_t>(n), 0.0));
}

void create_mlp2(ParameterStore& store, const std::string& prefix, std::int64_t d_in,
                 std::int64_t d_hidden, std::int64_t d_out, std::uint64_t seed) {
  create_weight(store, prefix + ".w1", d_in, d_hidden, seed);
  create_bias(store, prefix + ".b1", d_hidden);
  create_weight(store, prefix + ".w2", d_hidden, d_out, seed);
  create_bias(store, prefix + ".b2", d_out);
}

void create_norm(ParameterStore& store, const std::string& prefix, std::int64_t d) {
  store.create(prefix + ".ln.g", {d}, std::vector<double>(static_cast<std::size_t>(d), 1.0));
  create_bias(store, prefix + ".ln.b", d);
}

std::int64_t readout_dim(const ModelSpec& spec) {
  switch (spec.readout_source) {
    case ReadoutSource::nodes: return spec.d_hidden_down;
    case ReadoutSource::virtual_nodes: return spec.d_hidden_virtual;
    case ReadoutSource::both: return spec.d_hidden_down + spec.d_hidden_virtual;
    case ReadoutSource::root: return spec.d_hidden_down;
  }
  throw std::logic_error("unreachable readout source");
}

BlockLayout single_layout(const AttributedGraph& g, const ModelSpec& spec) {
  BlockLayout lay;
  lay.q = 1;
  lay.B = 1;
  lay.m = spec.m;
  lay.N = g.n;
  lay.node_offset = {0, g.n};
  return lay;
}

}  // namespace

Agg agg_from_string(const std::string& s) {
  if (s == "sum") return Agg::sum;
  if (s == "mean") return Agg::mean;
  if (s == "max") return Agg::max;
  throw std::invalid_argument("unknown aggregator '" + s + "' (want sum|mean|max)");
}

std::string agg_to_string(Agg a) {
  switch (a) {
    case Agg::sum: return "sum";
    case Agg::mean: return "mean";
    case Agg::max: return "max";
  }
  throw std::logic_error("unreachable aggregator");
}

VirtualInit virtual_init_from_string(const std::string& s) {
  if (s == "subgraph_mpnn") return VirtualInit::subgraph_mpnn;
  if (s == "random") return VirtualInit::random;
  if (s == "identity") return VirtualInit::identity;
  throw std::invalid_argument("unknown virtual init '" + s +
                              "' (want subgraph_mpnn|random|identity)");
}

std::string virtual_init_to_string(VirtualInit v) {
  switch (v) {
    case VirtualInit::subgraph_mpnn: return "subgraph_mpnn";
    case VirtualInit::random: return "random";
    case VirtualInit::identity: return "identity";
  }
  throw std::logic_error("unreachable virtual init");
}

ReadoutSource readout_from_string(const std::string& s) {
  if (s == "nodes") return ReadoutSource::nodes;
  if (s == "virtual") return ReadoutSource::virtual_nodes;
  if (s == "both") return ReadoutSource::both;
  if (s == "root") return ReadoutSource::root;
  throw std::invalid_argument("unknown readout source '" + s + "' (want nodes|virtual|both|root)");
}

std::string readout_to_string(ReadoutSource r) {
  switch (r) {
    case ReadoutSource::nodes: return "nodes";
    case ReadoutSource::virtual_nodes: return "virtual";
    case ReadoutSource::both: return "both";
    case ReadoutSource::root: return "root";
  }
  throw std::logic_error("unreachable readout source");
}

void ModelSpec::validate() const {
  auto positive = [](std::int64_t v, const char* what) {
    if (v < 1) {
      throw std::invalid_argument(std::string(what) + " must be positive, got " + std::to_string(v));
    }
  };
  positive(d_in, "d_in");
  positive(d_hidden_up, "d_hidden_up");
  positive(d_hidden_down, "d_hidden_down");
  positive(d_hidden_virtual, "d_hidden_virtual");
  positive(layers_down, "layers_down");
  positive(m, "m");
  positive(q, "q");
  positive(out_dim, "out_dim");
  if (layers_up < 0) throw std::invalid_argument("layers_up must be non-negative");
  if (d_edge < 0) throw std::invalid_argument("d_edge must be non-negative");
  if (k < 1 || k > m) {
    throw std::invalid_argument("need 1 <= k <= m, got k=" + std::to_string(k) +
                                ", m=" + std::to_string(m));
  }
  if (!ds_enabled &&
      (readout_source == ReadoutSource::virtual_nodes || readout_source == ReadoutSource::both)) {
    throw std::invalid_argument("virtual readout requires ds_enabled");
  }
}

void init_params(ParameterStore& store, const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  if (spec.ds_enabled) {
    if (spec.layers_up == 0) {
      create_mlp2(store, "up.embed", spec.d_in, spec.d_hidden_up, spec.d_hidden_up, seed);
    }
    for (std::int64_t i = 0; i < spec.layers_up; ++i) {
      const std::string prefix = "up.l" + std::to_string(i);
      const std::int64_t d_layer_in = i == 0 ? spec.d_in : spec.d_hidden_up;
      create_mlp2(store, prefix, d_layer_in, spec.d_hidden_up, spec.d_hidden_up, seed);
      if (spec.layer_norm) create_norm(store, prefix, spec.d_hidden_up);
      if (spec.d_edge > 0) create_weight(store, prefix + ".edge.w", spec.d_edge, d_layer_in, seed);
    }
    create_weight(store, "up.head.w", spec.d_hidden_up, spec.m, seed);
    create_bias(store, "up.head.b", spec.m);
    if (spec.virtual_init == VirtualInit::identity) {
      create_weight(store, "vinit.id.w", spec.m, spec.d_hidden_virtual, seed);
    } else if (spec.virtual_init == VirtualInit::subgraph_mpnn) {
      create_mlp2(store, "vinit.l0", spec.d_in, spec.d_hidden_virtual, spec.d_hidden_virtual, seed);
    }
  }
  create_weight(store, "down.embed.w", spec.d_in, spec.d_hidden_down, seed);
  create_bias(store, "down.embed.b", spec.d_hidden_down);
  for (std::int64_t t = 0; t < spec.layers_down; ++t) {
    const std::string prefix = layer_prefix(t);
    if (spec.ds_enabled) {
      create_weight(store, prefix + ".pool.w", spec.d_hidden_down, spec.d_hidden_virtual, seed);
      create_bias(store, prefix + ".pool.b", spec.d_hidden_virtual);
      create_mlp2(store, prefix + ".upc", 3 * spec.d_hidden_virtual, spec.d_hidden_virtual,
                  spec.d_hidden_virtual, seed);
      if (spec.layer_norm) create_norm(store, prefix + ".upc", spec.d_hidden_virtual);
      create_weight(store, prefix + ".ds.w", spec.d_hidden_virtual, spec.d_hidden_down, seed);
      create_bias(store, prefix + ".ds.b", spec.d_hidden_down);
    }
    create_mlp2(store, prefix + ".upd", spec.d_hidden_down, spec.d_hidden_down,
                spec.d_hidden_down, seed);
    if (spec.layer_norm) create_norm(store, prefix + ".upd", spec.d_hidden_down);
    if (spec.d_edge > 0) create_weight(store, prefix + ".edge.w", spec.d_edge, spec.d_hidden_down, seed);
  }
  create_mlp2(store, "head", readout_dim(spec), spec.d_hidden_down, spec.out_dim, seed);
}

Tensor upstream_priors(Tape& tape, const AttributedGraph& g, const ModelSpec& spec,
                       ParameterStore& params) {
  UnionGraph u = build_union({&g}, spec);
  ParamBinder bind(tape, params);
  return upstream_core(bind, u, spec);
}

Tensor init_virtual(Tape& tape, const AttributedGraph& g, const AssignmentMatrix& assign,
                    const ModelSpec& spec, ParameterStore& params, Rng& rng) {
  ParamBinder bind(tape, params);
  switch (spec.virtual_init) {
    case VirtualInit::identity: return bind("vinit.id.w");
    case VirtualInit::random: {
      Tensor g0({spec.m, spec.d_hidden_virtual});
      for (std::int64_t i = 0; i < g0.numel(); ++i) g0.mutable_data()[i] = rng.next_normal();
      return g0;
    }
    case VirtualInit::subgraph_mpnn: {
      const auto groups = inverse_assignment(assign);
      std::vector<Tensor> rows;
      rows.reserve(static_cast<std::size_t>(spec.m));
      for (std::int64_t c = 0; c < spec.m; ++c) {
        rows.push_back(subgraph_summary(bind, g, groups[static_cast<std::size_t>(c)],
                                        spec.d_hidden_virtual));
      }
      return concat_rows(rows);
    }
  }
  throw std::logic_error("unreachable virtual init mode");
}

Tensor aggregate_to_virtual(Tape& tape, const HiddenState& state, const AssignmentMatrix& assign,
                            const ModelSpec& spec, ParameterStore& params, std::int64_t layer) {
  ParamBinder bind(tape, params);
  BlockLayout lay;
  lay.q = 1;
  lay.B = 1;
  lay.m = spec.m;
  lay.N = assign.n;
  lay.node_offset = {0, assign.n};
  Tensor pooled = pool_to_virtual(state.h, {constant_weights(assign)}, {assign}, lay,
                                  spec.agg_nodes);
  return relu(linear(bind, layer_prefix(layer) + ".pool", pooled));
}

Tensor update_virtual(Tape& tape, const HiddenState& state, const Tensor& pooled,
                      const ModelSpec& spec, ParameterStore& params, std::int64_t layer) {
  ParamBinder bind(tape, params);
  BlockLayout lay;
  lay.q = 1;
  lay.B = 1;
  lay.m = spec.m;
  Tensor others = others_aggregate(pooled, lay, spec.agg_virtual);
  return maybe_norm(bind, spec, layer_prefix(layer) + ".upc",
                    mlp2(bind, layer_prefix(layer) + ".upc", concat_cols({state.g, pooled, others})));
}

Tensor update_original(Tape& tape, const HiddenState& state, const Tensor& g_new,
                       const AttributedGraph& graph, const AssignmentMatrix& assign,
                       const ModelSpec& spec, ParameterStore& params, std::int64_t layer) {
  ParamBinder bind(tape, params);
  const std::string prefix = layer_prefix(layer);
  std::vector<std::int64_t> adj(graph.adj.begin(), graph.adj.end());
  Tensor edge_embedded;
  const Tensor* edge_ptr = nullptr;
  if (spec.d_edge > 0 && graph.edge_count() > 0) {
    // duplicate undirected edge features into CSR order
    UnionGraph u = build_union({&graph}, spec);
    edge_embedded = matmul(u.edge_features, bind(prefix + ".edge.w"));
    edge_ptr = &edge_embedded;
  }
  Tensor neigh = neighbor_aggregate(state.h, graph.adj_offsets, adj, spec.agg_neighbors, edge_ptr);
  Tensor pre = neigh;
  if (spec.ds_enabled) {
    BlockLayout lay = single_layout(graph, spec);
    Tensor dist = distribute_to_nodes(g_new, {constant_weights(assign)}, {assign}, lay, spec.k,
                                      spec.agg_distribute);
    pre = add(neigh, linear(bind, prefix + ".ds", dist));
  }
  return add(state.h, maybe_norm(bind, spec, prefix + ".upd", mlp2(bind, prefix + ".upd", pre)));
}

namespace {

Tensor slice_graph_rows(const Tensor& theta, const UnionGraph& u, std::int64_t b) {
  if (u.B == 1) return theta;
  std::vector<std::int64_t> rows(
      static_cast<std::size_t>(u.node_offset[static_cast<std::size_t>(b + 1)] -
                               u.node_offset[static_cast<std::size_t>(b)]));
  std::iota(rows.begin(), rows.end(), u.node_offset[static_cast<std::size_t>(b)]);
  return gather_rows(theta, rows);
}

ForwardResult forward_impl(Tape& tape, const std::vector<const AttributedGraph*>& graphs,
                           const ModelSpec& spec, ParameterStore& params, std::uint64_t seed,
                           ForwardMode mode, const Tensor* priors_override) {
  spec.validate();
  UnionGraph u = build_union(graphs, spec);
  ParamBinder bind(tape, params);
  ForwardResult out;

  const bool ds = spec.ds_enabled;
  const std::int64_t q_eff = ds ? (mode == ForwardMode::relaxed ? 1 : spec.q) : 1;
  BlockLayout lay;
  lay.q = q_eff;
  lay.B = u.B;
  lay.m = spec.m;
  lay.N = u.N;
  lay.node_offset = u.node_offset;

  std::vector<Tensor> blocks;
  std::vector<AssignmentMatrix> structures;
  if (ds) {
    if (mode == ForwardMode::relaxed) {
      if (spec.agg_nodes != Agg::sum ||
          (spec.agg_distribute != Agg::sum && spec.agg_distribute != Agg::mean)) {
        throw std::invalid_argument(
            "relaxed forward requires agg_nodes=sum and agg_distribute in {sum, mean}");
      }
      if (spec.virtual_init == VirtualInit::subgraph_mpnn) {
        throw std::invalid_argument("relaxed forward has no discrete subgraphs to initialize from");
      }
    }
    Tensor theta;
    if (priors_override != nullptr) {
      if (priors_override->rank() != 2 || priors_override->rows() != u.N ||
          priors_override->cols() != spec.m) {
        throw std::invalid_argument("priors must be [" + std::to_string(u.N) + " x " +
                                    std::to_string(spec.m) + "], got shape " +
                                    shape_str(priors_override->shape()));
      }
      // Constants are bound as a leaf so callers can read d loss / d theta
      // off the tape the same way as with the learned upstream model.
      theta = priors_override->on_tape() ? *priors_override : tape.leaf(*priors_override);
    } else {
      theta = upstream_core(bind, u, spec);
    }
    out.priors = theta;
    blocks.resize(static_cast<std::size_t>(q_eff * u.B));
    if (mode == ForwardMode::sampled) {
      structures.resize(static_cast<std::size_t>(q_eff * u.B));
      for (std::int64_t b = 0; b < u.B; ++b) {
        auto samples = exactk::straight_through_assign(tape, slice_graph_rows(theta, u, b), spec.k,
                                                       q_eff, seed, static_cast<std::uint64_t>(b));
        for (std::int64_t s = 0; s < q_eff; ++s) {
          blocks[static_cast<std::size_t>(s * u.B + b)] = samples[static_cast<std::size_t>(s)].weights;
          structures[static_cast<std::size_t>(s * u.B + b)] =
              std::move(samples[static_cast<std::size_t>(s)].structure);
        }
      }
      out.assignments = structures;
    } else {
      for (std::int64_t b = 0; b < u.B; ++b) {
        blocks[static_cast<std::size_t>(b)] =
            exactk::relaxed_assignment(slice_graph_rows(theta, u, b), spec.k);
      }
    }
  }

  // initial node states, replicated once per sample
  Tensor h = linear(bind, "down.embed", u.features);
  if (q_eff > 1) {
    std::vector<std::int64_t> tile(static_cast<std::size_t>(q_eff * u.N));
    for (std::int64_t r = 0; r < static_cast<std::int64_t>(tile.size()); ++r) {
      tile[static_cast<std::size_t>(r)] = r % u.N;
    }
    h = gather_rows(h, tile);
  }

  // replicated adjacency
  std::vector<std::int64_t> adj_offsets(static_cast<std::size_t>(q_eff * u.N + 1));
  std::vector<std::int64_t> adj(static_cast<std::size_t>(q_eff * u.E2));
  for (std::int64_t s = 0; s < q_eff; ++s) {
    for (std::int64_t v = 0; v < u.N; ++v) {
      adj_offsets[static_cast<std::size_t>(s * u.N + v)] =
          s * u.E2 + u.adj_offsets[static_cast<std::size_t>(v)];
    }
    for (std::int64_t e = 0; e < u.E2; ++e) {
      adj[static_cast<std::size_t>(s * u.E2 + e)] = s * u.N + u.adj[static_cast<std::size_t>(e)];
    }
  }
  adj_offsets[static_cast<std::size_t>(q_eff * u.N)] = q_eff * u.E2;
  Tensor edge_tiled;
  if (spec.d_edge > 0 && u.E2 > 0) {
    std::vector<double> ef(static_cast<std::size_t>(q_eff * u.E2 * spec.d_edge));
    for (std::int64_t s = 0; s < q_eff; ++s) {
      std::copy(u.edge_features.data(), u.edge_features.data() + u.E2 * spec.d_edge,
                ef.begin() + s * u.E2 * spec.d_edge);
    }
    edge_tiled = Tensor({q_eff * u.E2, spec.d_edge}, std::move(ef));
  }

  Tensor g;
  if (ds) g = init_virtual_blocks(bind, graphs, structures, lay, spec, seed);

  for (std::int64_t t = 0; t < spec.layers_down; ++t) {
    const std::string prefix = layer_prefix(t);
    if (ds) {
      Tensor pooled = pool_to_virtual(h, blocks, structures, lay, spec.agg_nodes);
      Tensor gbar = relu(linear(bind, prefix + ".pool", pooled));
      Tensor others = others_aggregate(gbar, lay, spec.agg_virtual);
      g = maybe_norm(bind, spec, prefix + ".upc",
                     mlp2(bind, prefix + ".upc", concat_cols({g, gbar, others})));
    }
    Tensor edge_embedded;
    const Tensor* edge_ptr = nullptr;
    if (spec.d_edge > 0 && u.E2 > 0) {
      edge_embedded = matmul(edge_tiled, bind(prefix + ".edge.w"));
      edge_ptr = &edge_embedded;
    }
    Tensor neigh = neighbor_aggregate(h, adj_offsets, adj, spec.agg_neighbors, edge_ptr);
    Tensor pre = neigh;
    if (ds) {
      Tensor dist = distribute_to_nodes(g, blocks, structures, lay, spec.k, spec.agg_distribute);
      pre = add(neigh, linear(bind, prefix + ".ds", dist));
    }
    h = add(h, maybe_norm(bind, spec, prefix + ".upd", mlp2(bind, prefix + ".upd", pre)));
  }

  Tensor readout = readout_rows(h, g, lay, spec);
  out.sample_logits = mlp2(bind, "head", readout);
  if (q_eff == 1) {
    out.prediction = out.sample_logits;
  } else {
    std::vector<std::vector<std::int32_t>> lists(static_cast<std::size_t>(u.B));
    for (std::int64_t b = 0; b < u.B; ++b) {
      for (std::int64_t s = 0; s < q_eff; ++s) {
        lists[static_cast<std::size_t>(b)].push_back(static_cast<std::int32_t>(s * u.B + b));
      }
    }
    out.prediction = group_reduce(out.sample_logits, RowGroups::from_lists(lists), Reduce::mean);
  }
  return out;
}

}  // namespace

ForwardResult forward_batch(Tape& tape, const std::vector<const AttributedGraph*>& graphs,
                            const ModelSpec& spec, ParameterStore& params, std::uint64_t seed,
                            ForwardMode mode) {
  return forward_impl(tape, graphs, spec, params, seed, mode, nullptr);
}

ForwardResult forward(Tape& tape, const AttributedGraph& g, const ModelSpec& spec,
                      ParameterStore& params, std::uint64_t seed, ForwardMode mode) {
  return forward_impl(tape, {&g}, spec, params, seed, mode, nullptr);
}

ForwardResult forward_from_priors(Tape& tape, const std::vector<const AttributedGraph*>& graphs,
                                  const Tensor& priors, const ModelSpec& spec,
                                  ParameterStore& params, std::uint64_t seed, ForwardMode mode) {
  if (!spec.ds_enabled) {
    throw std::invalid_argument("forward_from_priors needs the virtual hierarchy enabled");
  }
  return forward_impl(tape, graphs, spec, params, seed, mode, &priors);
}

std::int64_t count_message_ops(const AttributedGraph& g, const ModelSpec& spec) {
  return 2 * g.edge_count() + g.n * spec.k + spec.m * (spec.m - 1) + g.n * spec.k;
}

}  // namespace ipr
