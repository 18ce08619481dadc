#include "ipr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <queue>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "ipr/exactk.hpp"

namespace ipr {

namespace {

constexpr double kNullspaceCutoff = 1e-9;

// Pairwise resistances of a unit-weight multigraph given as a raw edge list,
// computed per connected component from the eigendecomposition of the dense
// Laplacian.  Only pairs with both endpoints < pair_limit are reported.
void resistance_over_pairs(std::int64_t n, const std::vector<std::pair<std::int64_t, std::int64_t>>& edges,
                           std::int64_t pair_limit, ResistanceReport& report) {
  std::vector<std::vector<std::int64_t>> adjacency(static_cast<std::size_t>(n));
  for (const auto& [a, b] : edges) {
    adjacency[static_cast<std::size_t>(a)].push_back(b);
    adjacency[static_cast<std::size_t>(b)].push_back(a);
  }

  std::vector<std::int64_t> component(static_cast<std::size_t>(n), -1);
  std::int64_t component_count = 0;
  for (std::int64_t root = 0; root < n; ++root) {
    if (component[static_cast<std::size_t>(root)] >= 0) continue;
    std::queue<std::int64_t> frontier;
    frontier.push(root);
    component[static_cast<std::size_t>(root)] = component_count;
    while (!frontier.empty()) {
      const std::int64_t v = frontier.front();
      frontier.pop();
      for (std::int64_t w : adjacency[static_cast<std::size_t>(v)]) {
        if (component[static_cast<std::size_t>(w)] < 0) {
          component[static_cast<std::size_t>(w)] = component_count;
          frontier.push(w);
        }
      }
    }
    ++component_count;
  }

  report.r_total = 0.0;
  report.per_pair.clear();
  for (std::int64_t c = 0; c < component_count; ++c) {
    std::vector<std::int64_t> members;
    for (std::int64_t v = 0; v < n; ++v) {
      if (component[static_cast<std::size_t>(v)] == c) members.push_back(v);
    }
    const std::int64_t s = static_cast<std::int64_t>(members.size());
    if (s < 2) continue;
    std::vector<std::int64_t> local(static_cast<std::size_t>(n), -1);
    for (std::int64_t i = 0; i < s; ++i) local[static_cast<std::size_t>(members[static_cast<std::size_t>(i)])] = i;

    Eigen::MatrixXd laplacian = Eigen::MatrixXd::Zero(s, s);
    for (const auto& [a, b] : edges) {
      if (component[static_cast<std::size_t>(a)] != c) continue;
      const std::int64_t ia = local[static_cast<std::size_t>(a)];
      const std::int64_t ib = local[static_cast<std::size_t>(b)];
      laplacian(ia, ia) += 1.0;
      laplacian(ib, ib) += 1.0;
      laplacian(ia, ib) -= 1.0;
      laplacian(ib, ia) -= 1.0;
    }

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(laplacian);
    Eigen::VectorXd inverted = solver.eigenvalues();
    for (std::int64_t i = 0; i < s; ++i) {
      inverted(i) = inverted(i) > kNullspaceCutoff ? 1.0 / inverted(i) : 0.0;
    }
    const Eigen::MatrixXd pinv =
        solver.eigenvectors() * inverted.asDiagonal() * solver.eigenvectors().transpose();

    for (std::int64_t i = 0; i < s; ++i) {
      const std::int64_t u = members[static_cast<std::size_t>(i)];
      if (u >= pair_limit) continue;
      for (std::int64_t j = i + 1; j < s; ++j) {
        const std::int64_t v = members[static_cast<std::size_t>(j)];
        if (v >= pair_limit) continue;
        const double r = pinv(i, i) + pinv(j, j) - 2.0 * pinv(i, j);
        report.per_pair[{std::min(u, v), std::max(u, v)}] = r;
        report.r_total += r;
      }
    }
  }
}

std::vector<std::pair<std::int64_t, std::int64_t>> graph_edges(const AttributedGraph& g) {
  std::vector<std::pair<std::int64_t, std::int64_t>> edges;
  edges.reserve(g.edges.size());
  for (const auto& [a, b] : g.edges) edges.emplace_back(a, b);
  return edges;
}

}  // namespace

ResistanceReport effective_resistance(const AttributedGraph& g) {
  ResistanceReport report;
  resistance_over_pairs(g.n, graph_edges(g), g.n, report);
  return report;
}

ResistanceReport rewired_resistance(const AttributedGraph& g, const AssignmentMatrix& h) {
  if (h.n != g.n) {
    throw std::invalid_argument("assignment row count does not match the graph");
  }
  std::vector<std::pair<std::int64_t, std::int64_t>> edges = graph_edges(g);
  for (std::int64_t v = 0; v < h.n; ++v) {
    for (std::int32_t c : h.rows[static_cast<std::size_t>(v)]) {
      edges.emplace_back(v, g.n + c);
    }
  }
  for (std::int64_t a = 0; a < h.m; ++a) {
    for (std::int64_t b = a + 1; b < h.m; ++b) {
      edges.emplace_back(g.n + a, g.n + b);
    }
  }
  ResistanceReport report;
  resistance_over_pairs(g.n + h.m, edges, g.n, report);
  return report;
}

DistantPair most_distant_pair(const AttributedGraph& g) {
  DistantPair best;
  std::vector<std::int64_t> dist(static_cast<std::size_t>(g.n));
  for (std::int64_t u = 0; u < g.n; ++u) {
    std::fill(dist.begin(), dist.end(), -1);
    dist[static_cast<std::size_t>(u)] = 0;
    std::queue<std::int64_t> frontier;
    frontier.push(u);
    while (!frontier.empty()) {
      const std::int64_t v = frontier.front();
      frontier.pop();
      for (std::int64_t e = g.adj_offsets[static_cast<std::size_t>(v)];
           e < g.adj_offsets[static_cast<std::size_t>(v + 1)]; ++e) {
        const std::int64_t w = g.adj[static_cast<std::size_t>(e)];
        if (dist[static_cast<std::size_t>(w)] < 0) {
          dist[static_cast<std::size_t>(w)] = dist[static_cast<std::size_t>(v)] + 1;
          frontier.push(w);
        }
      }
    }
    for (std::int64_t v = u + 1; v < g.n; ++v) {
      if (dist[static_cast<std::size_t>(v)] < 0) {
        throw std::invalid_argument("most_distant_pair requires a connected graph");
      }
      if (dist[static_cast<std::size_t>(v)] > best.dist) {
        best = {u, v, dist[static_cast<std::size_t>(v)]};
      }
    }
  }
  return best;
}

double layer_sensitivity(const AttributedGraph& g, const ModelSpec& spec, ParameterStore& params,
                         std::int64_t u, std::int64_t v, std::int64_t k_layer,
                         std::int64_t l_layer, std::uint64_t seed) {
  if (u < 0 || u >= g.n || v < 0 || v >= g.n) {
    throw std::out_of_range("sensitivity node index out of range");
  }
  if (k_layer < 0 || k_layer > l_layer || l_layer > spec.layers_down) {
    throw std::invalid_argument("sensitivity layers must satisfy 0 <= k <= l <= layers_down");
  }
  if (g.feature_dim() != spec.d_in) {
    throw std::invalid_argument("graph feature dim " + std::to_string(g.feature_dim()) +
                                " does not match model d_in " + std::to_string(spec.d_in));
  }
  const std::int64_t d = spec.d_hidden_down;
  if (k_layer == l_layer) {
    // d h^k / d h^k is the identity; distinct nodes share no state.
    return u == v ? std::log(static_cast<double>(d))
                  : -std::numeric_limits<double>::infinity();
  }

  AssignmentMatrix assign;
  if (spec.ds_enabled) {
    Tape prior_tape;
    Tensor theta = upstream_priors(prior_tape, g, spec, params);
    assign = exactk::sample_assignment(theta, spec.k, seed, 0, 0);
  }

  Tape tape;
  HiddenState state;
  state.h = add_bias(matmul(tape.leaf(g.features), params.leaf(tape, "down.embed.w")),
                     params.leaf(tape, "down.embed.b"));
  if (spec.ds_enabled) {
    Rng rng = Rng::derive(seed, {0x76696e69ULL});
    state.g = init_virtual(tape, g, assign, spec, params, rng);
  }
  Tensor h_k = state.h;
  for (std::int64_t t = 0; t < l_layer; ++t) {
    Tensor g_new;
    if (spec.ds_enabled) {
      Tensor pooled = aggregate_to_virtual(tape, state, assign, spec, params, t);
      g_new = update_virtual(tape, state, pooled, spec, params, t);
    }
    state.h = update_original(tape, state, g_new, g, assign, spec, params, t);
    state.g = g_new;
    state.layer = t + 1;
    if (state.layer == k_layer) h_k = state.h;
  }
  const Tensor h_l = state.h;

  // One reverse sweep per output dimension recovers a Jacobian row exactly;
  // the symmetric sum needs both directions unless they coincide.
  std::vector<double> summed(static_cast<std::size_t>(d * d), 0.0);
  auto accumulate = [&](std::int64_t src, std::int64_t dst) {
    std::vector<double> seed_vec(static_cast<std::size_t>(h_l.numel()), 0.0);
    for (std::int64_t j = 0; j < d; ++j) {
      seed_vec[static_cast<std::size_t>(src * d + j)] = 1.0;
      tape.backward_from(h_l, seed_vec);
      seed_vec[static_cast<std::size_t>(src * d + j)] = 0.0;
      const std::vector<double> grad = tape.grad(h_k);
      for (std::int64_t i = 0; i < d; ++i) {
        summed[static_cast<std::size_t>(j * d + i)] += grad[static_cast<std::size_t>(dst * d + i)];
      }
    }
  };
  accumulate(v, u);
  if (u != v) accumulate(u, v);

  double norm = 0.0;
  for (double x : summed) norm += std::abs(x);
  return norm == 0.0 ? -std::numeric_limits<double>::infinity() : std::log(norm);
}

namespace {

// Regularized incomplete gamma pair P(a, x) / Q(a, x): power series below the
// a+1 crossover, Lentz continued fraction above.
double lower_gamma_series(double a, double x) {
  double term = 1.0 / a;
  double sum = term;
  double denom = a;
  for (int i = 0; i < 500; ++i) {
    denom += 1.0;
    term *= x / denom;
    sum += term;
    if (std::abs(term) < std::abs(sum) * 1e-16) break;
  }
  return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

double upper_gamma_fraction(double a, double x) {
  constexpr double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i <= 500; ++i) {
    const double an = -static_cast<double>(i) * (static_cast<double>(i) - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < 1e-16) break;
  }
  return h * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

}  // namespace

double chi_square_sf(double stat, double dof) {
  if (!(dof > 0.0)) throw std::invalid_argument("chi-square needs dof > 0");
  if (!(stat > 0.0)) return 1.0;
  const double a = dof / 2.0;
  const double x = stat / 2.0;
  return x < a + 1.0 ? 1.0 - lower_gamma_series(a, x) : upper_gamma_fraction(a, x);
}

}  // namespace ipr
