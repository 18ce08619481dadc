#include "ipr/graph.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace ipr {

AttributedGraph::AttributedGraph(std::int64_t n_,
                                 std::vector<std::pair<std::int32_t, std::int32_t>> edges_,
                                 Tensor features_, std::optional<Tensor> edge_features_,
                                 std::optional<std::vector<double>> label_)
    : n(n_), edges(std::move(edges_)), features(std::move(features_)),
      edge_features(std::move(edge_features_)), label(std::move(label_)) {
  if (n < 0) throw std::invalid_argument("graph order must be non-negative");
  if (features.rank() != 2 || features.rows() != n) {
    throw std::invalid_argument("node features must be [n x d] with n=" + std::to_string(n) +
                                ", got shape " + shape_str(features.shape()));
  }
  for (auto& [u, v] : edges) {
    if (u == v) throw std::invalid_argument("self-loop at node " + std::to_string(u));
    if (u < 0 || v < 0 || u >= n || v >= n) {
      throw std::invalid_argument("edge (" + std::to_string(u) + ", " + std::to_string(v) +
                                  ") has an endpoint outside [0, " + std::to_string(n) + ")");
    }
    if (u > v) std::swap(u, v);
  }
  // Keep edge features aligned with the sorted edge order.
  std::vector<std::size_t> perm(edges.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  std::sort(perm.begin(), perm.end(),
            [&](std::size_t a, std::size_t b) { return edges[a] < edges[b]; });
  std::vector<std::pair<std::int32_t, std::int32_t>> sorted_edges(edges.size());
  for (std::size_t i = 0; i < perm.size(); ++i) sorted_edges[i] = edges[perm[i]];
  for (std::size_t i = 1; i < sorted_edges.size(); ++i) {
    if (sorted_edges[i] == sorted_edges[i - 1]) {
      throw std::invalid_argument("duplicate edge (" + std::to_string(sorted_edges[i].first) +
                                  ", " + std::to_string(sorted_edges[i].second) + ")");
    }
  }
  if (edge_features.has_value()) {
    if (edge_features->rank() != 2 ||
        edge_features->rows() != static_cast<std::int64_t>(edges.size())) {
      throw std::invalid_argument("edge features must be [|E| x d_e] with |E|=" +
                                  std::to_string(edges.size()) + ", got shape " +
                                  shape_str(edge_features->shape()));
    }
    const std::int64_t de = edge_features->cols();
    Tensor reordered({static_cast<std::int64_t>(edges.size()), de});
    for (std::size_t i = 0; i < perm.size(); ++i) {
      std::copy(edge_features->data() + static_cast<std::int64_t>(perm[i]) * de,
                edge_features->data() + static_cast<std::int64_t>(perm[i] + 1) * de,
                reordered.mutable_data() + static_cast<std::int64_t>(i) * de);
    }
    edge_features = std::move(reordered);
  }
  edges = std::move(sorted_edges);

  // CSR adjacency, neighbor lists sorted.
  adj_offsets.assign(static_cast<std::size_t>(n) + 1, 0);
  for (const auto& [u, v] : edges) {
    ++adj_offsets[static_cast<std::size_t>(u) + 1];
    ++adj_offsets[static_cast<std::size_t>(v) + 1];
  }
  for (std::size_t i = 1; i < adj_offsets.size(); ++i) adj_offsets[i] += adj_offsets[i - 1];
  adj.assign(static_cast<std::size_t>(adj_offsets.back()), 0);
  std::vector<std::int64_t> cursor(adj_offsets.begin(), adj_offsets.end() - 1);
  for (const auto& [u, v] : edges) {
    adj[static_cast<std::size_t>(cursor[static_cast<std::size_t>(u)]++)] = v;
    adj[static_cast<std::size_t>(cursor[static_cast<std::size_t>(v)]++)] = u;
  }
  for (std::int64_t v = 0; v < n; ++v) {
    std::sort(adj.begin() + adj_offsets[static_cast<std::size_t>(v)],
              adj.begin() + adj_offsets[static_cast<std::size_t>(v) + 1]);
  }
}

std::int64_t AttributedGraph::degree(std::int64_t v) const {
  if (v < 0 || v >= n) {
    throw std::invalid_argument("node " + std::to_string(v) + " outside [0, " + std::to_string(n) + ")");
  }
  return adj_offsets[static_cast<std::size_t>(v) + 1] - adj_offsets[static_cast<std::size_t>(v)];
}

std::vector<std::int32_t> neighbors(const AttributedGraph& g, std::int64_t v) {
  if (v < 0 || v >= g.n) {
    throw std::invalid_argument("node " + std::to_string(v) + " outside [0, " + std::to_string(g.n) + ")");
  }
  return std::vector<std::int32_t>(g.adj.begin() + g.adj_offsets[static_cast<std::size_t>(v)],
                                   g.adj.begin() + g.adj_offsets[static_cast<std::size_t>(v) + 1]);
}

InducedSubgraph induced_subgraph(const AttributedGraph& g, const std::vector<std::int32_t>& nodes) {
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i] < 0 || nodes[i] >= g.n) {
      throw std::invalid_argument("subgraph node " + std::to_string(nodes[i]) + " outside [0, " +
                                  std::to_string(g.n) + ")");
    }
    if (i > 0 && nodes[i] <= nodes[i - 1]) {
      throw std::invalid_argument("subgraph node list must be sorted and distinct");
    }
  }
  std::vector<std::int32_t> old_to_new(static_cast<std::size_t>(g.n), -1);
  for (std::size_t i = 0; i < nodes.size(); ++i) old_to_new[static_cast<std::size_t>(nodes[i])] = static_cast<std::int32_t>(i);

  const std::int64_t d = g.feature_dim();
  Tensor feats({static_cast<std::int64_t>(nodes.size()), d});
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    std::copy(g.features.data() + nodes[i] * d, g.features.data() + (nodes[i] + 1) * d,
              feats.mutable_data() + static_cast<std::int64_t>(i) * d);
  }

  std::vector<std::pair<std::int32_t, std::int32_t>> kept_edges;
  std::vector<std::size_t> kept_edge_idx;
  for (std::size_t e = 0; e < g.edges.size(); ++e) {
    auto [u, v] = g.edges[e];
    if (old_to_new[static_cast<std::size_t>(u)] >= 0 && old_to_new[static_cast<std::size_t>(v)] >= 0) {
      kept_edges.emplace_back(old_to_new[static_cast<std::size_t>(u)], old_to_new[static_cast<std::size_t>(v)]);
      kept_edge_idx.push_back(e);
    }
  }
  std::optional<Tensor> efeats;
  if (g.edge_features.has_value()) {
    const std::int64_t de = g.edge_features->cols();
    Tensor ef({static_cast<std::int64_t>(kept_edges.size()), de});
    for (std::size_t i = 0; i < kept_edge_idx.size(); ++i) {
      std::copy(g.edge_features->data() + static_cast<std::int64_t>(kept_edge_idx[i]) * de,
                g.edge_features->data() + static_cast<std::int64_t>(kept_edge_idx[i] + 1) * de,
                ef.mutable_data() + static_cast<std::int64_t>(i) * de);
    }
    efeats = std::move(ef);
  }

  InducedSubgraph out;
  out.graph = AttributedGraph(static_cast<std::int64_t>(nodes.size()), std::move(kept_edges),
                              std::move(feats), std::move(efeats), g.label);
  out.old_to_new = std::move(old_to_new);
  out.kept = nodes;
  return out;
}

AttributedGraph disjoint_union(const AttributedGraph& a, const AttributedGraph& b) {
  if (a.feature_dim() != b.feature_dim()) {
    throw std::invalid_argument("disjoint_union feature dimensions differ: " +
                                std::to_string(a.feature_dim()) + " vs " + std::to_string(b.feature_dim()));
  }
  if (a.edge_features.has_value() != b.edge_features.has_value()) {
    throw std::invalid_argument("disjoint_union edge-feature presence differs");
  }
  std::vector<std::pair<std::int32_t, std::int32_t>> edges = a.edges;
  for (auto [u, v] : b.edges) {
    edges.emplace_back(static_cast<std::int32_t>(u + a.n), static_cast<std::int32_t>(v + a.n));
  }
  Tensor feats({a.n + b.n, a.feature_dim()});
  std::copy(a.features.data(), a.features.data() + a.features.numel(), feats.mutable_data());
  std::copy(b.features.data(), b.features.data() + b.features.numel(),
            feats.mutable_data() + a.features.numel());
  std::optional<Tensor> efeats;
  if (a.edge_features.has_value()) {
    const std::int64_t de = a.edge_features->cols();
    if (de != b.edge_features->cols()) {
      throw std::invalid_argument("disjoint_union edge-feature dimensions differ");
    }
    Tensor ef({a.edge_count() + b.edge_count(), de});
    std::copy(a.edge_features->data(), a.edge_features->data() + a.edge_features->numel(),
              ef.mutable_data());
    std::copy(b.edge_features->data(), b.edge_features->data() + b.edge_features->numel(),
              ef.mutable_data() + a.edge_features->numel());
    efeats = std::move(ef);
  }
  return AttributedGraph(a.n + b.n, std::move(edges), std::move(feats), std::move(efeats));
}

Tensor laplacian(const AttributedGraph& g) {
  Tensor L({g.n, g.n});
  double* d = L.mutable_data();
  for (std::int64_t v = 0; v < g.n; ++v) d[v * g.n + v] = static_cast<double>(g.degree(v));
  for (auto [u, v] : g.edges) {
    d[static_cast<std::int64_t>(u) * g.n + v] = -1.0;
    d[static_cast<std::int64_t>(v) * g.n + u] = -1.0;
  }
  return L;
}

std::pair<std::vector<std::int32_t>, std::int64_t> connected_components(const AttributedGraph& g) {
  std::vector<std::int32_t> comp(static_cast<std::size_t>(g.n), -1);
  std::int64_t count = 0;
  std::vector<std::int32_t> stack;
  for (std::int64_t s = 0; s < g.n; ++s) {
    if (comp[static_cast<std::size_t>(s)] >= 0) continue;
    stack.push_back(static_cast<std::int32_t>(s));
    comp[static_cast<std::size_t>(s)] = static_cast<std::int32_t>(count);
    while (!stack.empty()) {
      std::int32_t v = stack.back();
      stack.pop_back();
      for (std::int64_t i = g.adj_offsets[static_cast<std::size_t>(v)];
           i < g.adj_offsets[static_cast<std::size_t>(v) + 1]; ++i) {
        std::int32_t u = g.adj[static_cast<std::size_t>(i)];
        if (comp[static_cast<std::size_t>(u)] < 0) {
          comp[static_cast<std::size_t>(u)] = static_cast<std::int32_t>(count);
          stack.push_back(u);
        }
      }
    }
    ++count;
  }
  return {std::move(comp), count};
}

AssignmentMatrix::AssignmentMatrix(std::int64_t n_, std::int64_t m_, std::int64_t k_,
                                   std::vector<std::vector<std::int32_t>> rows_)
    : n(n_), m(m_), k(k_), rows(std::move(rows_)) {
  if (m < 1 || k < 1 || k > m) {
    throw std::invalid_argument("assignment needs 1 <= k <= m, got k=" + std::to_string(k) +
                                ", m=" + std::to_string(m));
  }
  if (static_cast<std::int64_t>(rows.size()) != n) {
    throw std::invalid_argument("assignment has " + std::to_string(rows.size()) + " rows for n=" +
                                std::to_string(n));
  }
  for (std::int64_t v = 0; v < n; ++v) {
    auto& row = rows[static_cast<std::size_t>(v)];
    if (static_cast<std::int64_t>(row.size()) != k) {
      throw std::invalid_argument("assignment row " + std::to_string(v) + " has " +
                                  std::to_string(row.size()) + " entries, expected k=" + std::to_string(k));
    }
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (row[i] < 0 || row[i] >= m) {
        throw std::invalid_argument("assignment row " + std::to_string(v) + " references virtual node " +
                                    std::to_string(row[i]) + " outside [0, " + std::to_string(m) + ")");
      }
      if (i > 0 && row[i] <= row[i - 1]) {
        throw std::invalid_argument("assignment row " + std::to_string(v) + " must be sorted and distinct");
      }
    }
  }
}

std::vector<std::vector<std::int32_t>> inverse_assignment(const AssignmentMatrix& a) {
  std::vector<std::vector<std::int32_t>> inv(static_cast<std::size_t>(a.m));
  for (std::int64_t v = 0; v < a.n; ++v) {
    for (std::int32_t c : a.rows[static_cast<std::size_t>(v)]) {
      inv[static_cast<std::size_t>(c)].push_back(static_cast<std::int32_t>(v));
    }
  }
  return inv;  // node loop runs in increasing order, so each list is sorted
}

namespace {

AttributedGraph graph_from_parsed(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("graph record must be a JSON object");
  if (!j.contains("n") || !j["n"].is_number_integer()) {
    throw std::invalid_argument("graph record needs an integer field 'n'");
  }
  const std::int64_t n = j["n"].get<std::int64_t>();
  if (!j.contains("edges") || !j["edges"].is_array()) {
    throw std::invalid_argument("graph record needs an array field 'edges'");
  }
  std::vector<std::pair<std::int32_t, std::int32_t>> edges;
  for (const auto& e : j["edges"]) {
    if (!e.is_array() || e.size() != 2 || !e[0].is_number_integer() || !e[1].is_number_integer()) {
      throw std::invalid_argument("each edge must be a two-integer array");
    }
    edges.emplace_back(e[0].get<std::int32_t>(), e[1].get<std::int32_t>());
  }
  if (!j.contains("x") || !j["x"].is_array() || static_cast<std::int64_t>(j["x"].size()) != n) {
    throw std::invalid_argument("graph record needs a node-feature array 'x' of length n");
  }
  std::int64_t d = -1;
  std::vector<double> xs;
  for (const auto& row : j["x"]) {
    if (!row.is_array()) throw std::invalid_argument("'x' rows must be arrays");
    if (d < 0) d = static_cast<std::int64_t>(row.size());
    if (static_cast<std::int64_t>(row.size()) != d) {
      throw std::invalid_argument("'x' rows have inconsistent lengths");
    }
    for (const auto& v : row) xs.push_back(v.get<double>());
  }
  if (n == 0) d = std::max<std::int64_t>(d, 0);
  Tensor feats({n, std::max<std::int64_t>(d, 0)}, std::move(xs));

  std::optional<Tensor> efeats;
  if (j.contains("edge_attr") && !j["edge_attr"].is_null()) {
    const auto& ea = j["edge_attr"];
    if (!ea.is_array() || ea.size() != edges.size()) {
      throw std::invalid_argument("'edge_attr' must align with 'edges'");
    }
    std::int64_t de = -1;
    std::vector<double> es;
    for (const auto& row : ea) {
      if (!row.is_array()) throw std::invalid_argument("'edge_attr' rows must be arrays");
      if (de < 0) de = static_cast<std::int64_t>(row.size());
      if (static_cast<std::int64_t>(row.size()) != de) {
        throw std::invalid_argument("'edge_attr' rows have inconsistent lengths");
      }
      for (const auto& v : row) es.push_back(v.get<double>());
    }
    efeats = Tensor({static_cast<std::int64_t>(edges.size()), std::max<std::int64_t>(de, 0)}, std::move(es));
  }

  std::optional<std::vector<double>> label;
  if (j.contains("y") && !j["y"].is_null()) {
    if (j["y"].is_number()) {
      label = std::vector<double>{j["y"].get<double>()};
    } else if (j["y"].is_array()) {
      std::vector<double> ys;
      for (const auto& v : j["y"]) ys.push_back(v.get<double>());
      label = std::move(ys);
    } else {
      throw std::invalid_argument("'y' must be a number or an array of numbers");
    }
  }
  return AttributedGraph(n, std::move(edges), std::move(feats), std::move(efeats), std::move(label));
}

}  // namespace

AttributedGraph graph_from_json(const std::string& json_text) {
  nlohmann::json j = nlohmann::json::parse(json_text);
  return graph_from_parsed(j);
}

std::string graph_to_json(const AttributedGraph& g) {
  nlohmann::json j;
  j["n"] = g.n;
  nlohmann::json edges = nlohmann::json::array();
  for (auto [u, v] : g.edges) edges.push_back({u, v});
  j["edges"] = std::move(edges);
  nlohmann::json x = nlohmann::json::array();
  const std::int64_t d = g.feature_dim();
  for (std::int64_t v = 0; v < g.n; ++v) {
    nlohmann::json row = nlohmann::json::array();
    for (std::int64_t c = 0; c < d; ++c) row.push_back(g.features.at(v, c));
    x.push_back(std::move(row));
  }
  j["x"] = std::move(x);
  if (g.edge_features.has_value()) {
    nlohmann::json ea = nlohmann::json::array();
    for (std::int64_t e = 0; e < g.edge_count(); ++e) {
      nlohmann::json row = nlohmann::json::array();
      for (std::int64_t c = 0; c < g.edge_features->cols(); ++c) row.push_back(g.edge_features->at(e, c));
      ea.push_back(std::move(row));
    }
    j["edge_attr"] = std::move(ea);
  }
  if (g.label.has_value()) {
    if (g.label->size() == 1) j["y"] = (*g.label)[0];
    else j["y"] = *g.label;
  }
  return j.dump();
}

std::vector<AttributedGraph> load_jsonl(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open '" + path + "'");
  std::vector<AttributedGraph> out;
  std::string line;
  std::int64_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(graph_from_json(line));
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

void save_jsonl(const std::string& path, const std::vector<AttributedGraph>& graphs) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  for (const auto& g : graphs) os << graph_to_json(g) << "\n";
  if (!os) throw std::runtime_error("write failed for '" + path + "'");
}

}  // namespace ipr
