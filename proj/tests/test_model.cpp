#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include <doctest.h>

#include "ipr/model.hpp"

using ipr::Agg;
using ipr::AssignmentMatrix;
using ipr::AttributedGraph;
using ipr::ForwardMode;
using ipr::ModelSpec;
using ipr::ParameterStore;
using ipr::ReadoutSource;
using ipr::Rng;
using ipr::Tape;
using ipr::Tensor;
using ipr::VirtualInit;

namespace {

AttributedGraph path_graph(std::int64_t n, std::vector<double> features, std::int64_t d = 1) {
  std::vector<std::pair<std::int32_t, std::int32_t>> edges;
  for (std::int32_t v = 0; v + 1 < n; ++v) edges.emplace_back(v, v + 1);
  return AttributedGraph(n, std::move(edges), Tensor({n, d}, std::move(features)));
}

AttributedGraph cycle_graph(std::int64_t n, std::vector<double> features, std::int64_t d = 1) {
  std::vector<std::pair<std::int32_t, std::int32_t>> edges;
  for (std::int32_t v = 0; v + 1 < n; ++v) edges.emplace_back(v, v + 1);
  edges.emplace_back(0, static_cast<std::int32_t>(n - 1));
  return AttributedGraph(n, std::move(edges), Tensor({n, d}, std::move(features)));
}

std::vector<double> random_features(std::int64_t count, std::uint64_t seed) {
  Rng rng = Rng::derive(seed, {0xfeedULL});
  std::vector<double> v(static_cast<std::size_t>(count));
  for (double& x : v) x = rng.next_uniform(0.1, 2.0);
  return v;
}

void create_identity(ParameterStore& store, const std::string& name, std::int64_t d) {
  std::vector<double> values(static_cast<std::size_t>(d * d), 0.0);
  for (std::int64_t i = 0; i < d; ++i) values[static_cast<std::size_t>(i * d + i)] = 1.0;
  store.create(name, {d, d}, values);
}

void create_zeros(ParameterStore& store, const std::string& name, std::int64_t d) {
  store.create(name, {d}, std::vector<double>(static_cast<std::size_t>(d), 0.0));
}

// relu(x I + 0) I + 0 = x for non-negative activations
void create_identity_mlp(ParameterStore& store, const std::string& prefix, std::int64_t d) {
  create_identity(store, prefix + ".w1", d);
  create_zeros(store, prefix + ".b1", d);
  create_identity(store, prefix + ".w2", d);
  create_zeros(store, prefix + ".b2", d);
}

// Saturated logits: +30 on the assigned entries, -30 elsewhere, making the
// exactly-k draw deterministic for all practical purposes.
Tensor saturated_priors(const AssignmentMatrix& a) {
  Tensor t({a.n, a.m}, std::vector<double>(static_cast<std::size_t>(a.n * a.m), -30.0));
  for (std::int64_t v = 0; v < a.n; ++v) {
    for (std::int32_t c : a.rows[static_cast<std::size_t>(v)]) {
      t.mutable_data()[v * a.m + c] = 30.0;
    }
  }
  return t;
}

ModelSpec small_ds_spec() {
  ModelSpec spec;
  spec.d_in = 2;
  spec.d_hidden_up = 4;
  spec.layers_up = 1;
  spec.d_hidden_down = 4;
  spec.d_hidden_virtual = 5;
  spec.layers_down = 2;
  spec.m = 3;
  spec.k = 2;
  spec.q = 1;
  spec.out_dim = 2;
  spec.virtual_init = VirtualInit::identity;
  spec.readout_source = ReadoutSource::nodes;
  return spec;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("spec validation rejects inconsistent settings") {
  ModelSpec spec = small_ds_spec();
  CHECK_NOTHROW(spec.validate());

  spec.k = 4;  // k > m
  CHECK_THROWS_WITH_AS(spec.validate(), doctest::Contains("1 <= k <= m"), std::invalid_argument);
  spec.k = 2;

  spec.ds_enabled = false;
  spec.readout_source = ReadoutSource::virtual_nodes;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec.readout_source = ReadoutSource::root;
  CHECK_NOTHROW(spec.validate());

  spec = small_ds_spec();
  spec.out_dim = 0;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
}

TEST_CASE("enum string conversions round-trip") {
  for (Agg a : {Agg::sum, Agg::mean, Agg::max}) {
    CHECK(ipr::agg_from_string(ipr::agg_to_string(a)) == a);
  }
  for (VirtualInit v : {VirtualInit::subgraph_mpnn, VirtualInit::random, VirtualInit::identity}) {
    CHECK(ipr::virtual_init_from_string(ipr::virtual_init_to_string(v)) == v);
  }
  for (ReadoutSource r : {ReadoutSource::nodes, ReadoutSource::virtual_nodes, ReadoutSource::both,
                          ReadoutSource::root}) {
    CHECK(ipr::readout_from_string(ipr::readout_to_string(r)) == r);
  }
  CHECK_THROWS_AS(ipr::agg_from_string("median"), std::invalid_argument);
  CHECK_THROWS_AS(ipr::virtual_init_from_string(""), std::invalid_argument);
  CHECK_THROWS_AS(ipr::readout_from_string("leaf"), std::invalid_argument);
}

TEST_CASE("upstream priors: zero parameters give zero logits") {
  ModelSpec spec = small_ds_spec();
  spec.d_in = 1;
  ParameterStore store;
  ipr::init_params(store, spec, 1);
  for (const std::string& name : store.names()) {
    Tensor& v = store.value(name);
    std::fill(v.mutable_data(), v.mutable_data() + v.numel(), 0.0);
  }
  AttributedGraph g = path_graph(4, {1.0, 2.0, 3.0, 4.0});
  Tape tape;
  Tensor theta = ipr::upstream_priors(tape, g, spec, store);
  REQUIRE(theta.rows() == 4);
  REQUIRE(theta.cols() == spec.m);
  for (std::int64_t i = 0; i < theta.numel(); ++i) CHECK(theta.data()[i] == 0.0);
}

TEST_CASE("upstream priors: identity layer on the two-node path") {
  // features [1],[2]; one GIN layer with identity update, identity head:
  // theta_v = h_v + sum of neighbors = [3],[3]
  ModelSpec spec;
  spec.d_in = 1;
  spec.d_hidden_up = 1;
  spec.layers_up = 1;
  spec.m = 1;
  ParameterStore store;
  create_identity_mlp(store, "up.l0", 1);
  create_identity(store, "up.head.w", 1);
  create_zeros(store, "up.head.b", 1);

  AttributedGraph g = path_graph(2, {1.0, 2.0});
  Tape tape;
  Tensor theta = ipr::upstream_priors(tape, g, spec, store);
  CHECK(theta.data()[0] == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(theta.data()[1] == doctest::Approx(3.0).epsilon(1e-12));
}

TEST_CASE("upstream priors: permutation equivariance") {
  ModelSpec spec = small_ds_spec();
  ParameterStore store;
  ipr::init_params(store, spec, 11);

  AttributedGraph g(5, {{0, 1}, {1, 2}, {1, 3}, {3, 4}},
                    Tensor({5, 2}, random_features(10, 5)));
  // relabel via pi(v) = 4 - v
  std::vector<std::int32_t> pi = {4, 3, 2, 1, 0};
  std::vector<std::pair<std::int32_t, std::int32_t>> edges;
  for (auto [u, v] : g.edges) {
    std::int32_t a = pi[static_cast<std::size_t>(u)], b = pi[static_cast<std::size_t>(v)];
    edges.emplace_back(std::min(a, b), std::max(a, b));
  }
  Tensor feats({5, 2});
  for (std::int64_t v = 0; v < 5; ++v) {
    for (std::int64_t d = 0; d < 2; ++d) {
      feats.mutable_data()[pi[static_cast<std::size_t>(v)] * 2 + d] = g.features.data()[v * 2 + d];
    }
  }
  AttributedGraph gp(5, edges, feats);

  Tape t1, t2;
  Tensor theta = ipr::upstream_priors(t1, g, spec, store);
  Tensor theta_p = ipr::upstream_priors(t2, gp, spec, store);
  for (std::int64_t v = 0; v < 5; ++v) {
    for (std::int64_t c = 0; c < spec.m; ++c) {
      CHECK(theta.data()[v * spec.m + c] ==
            doctest::Approx(theta_p.data()[pi[static_cast<std::size_t>(v)] * spec.m + c])
                .epsilon(1e-12));
    }
  }
}

TEST_CASE("virtual init: identity rows ignore the graph and stay distinct") {
  ModelSpec spec = small_ds_spec();
  spec.m = 2;
  spec.k = 1;
  ParameterStore store;
  ipr::init_params(store, spec, 3);

  AttributedGraph g1 = path_graph(3, random_features(6, 1), 2);
  AttributedGraph g2 = cycle_graph(5, random_features(10, 2), 2);
  AssignmentMatrix a1(3, 2, 1, {{0}, {0}, {1}});
  AssignmentMatrix a2(5, 2, 1, {{0}, {1}, {0}, {1}, {0}});
  Rng rng = Rng::derive(9, {1});
  Tape tape;
  Tensor v1 = ipr::init_virtual(tape, g1, a1, spec, store, rng);
  Tensor v2 = ipr::init_virtual(tape, g2, a2, spec, store, rng);
  REQUIRE(v1.rows() == 2);
  double row_gap = 0.0;
  for (std::int64_t d = 0; d < spec.d_hidden_virtual; ++d) {
    CHECK(v1.data()[d] == v2.data()[d]);
    CHECK(v1.data()[spec.d_hidden_virtual + d] == v2.data()[spec.d_hidden_virtual + d]);
    row_gap += std::abs(v1.data()[d] - v1.data()[spec.d_hidden_virtual + d]);
  }
  CHECK(row_gap > 1e-6);
}

TEST_CASE("virtual init: subgraph pooling hand value and empty-set zero") {
  // P3 with features [1],[2],[3], all nodes assigned to virtual node 0 and
  // none to virtual node 1.  One identity GIN layer then sum-pool:
  // post-aggregation features are 1+2=3, 2+(1+3)=6, 3+2=5, so c=0 pools to 14.
  ModelSpec spec;
  spec.d_in = 1;
  spec.d_hidden_virtual = 1;
  spec.m = 2;
  spec.k = 1;
  spec.virtual_init = VirtualInit::subgraph_mpnn;
  ParameterStore store;
  create_identity_mlp(store, "vinit.l0", 1);

  AttributedGraph g = path_graph(3, {1.0, 2.0, 3.0});
  AssignmentMatrix assign(3, 2, 1, {{0}, {0}, {0}});
  Rng rng = Rng::derive(1, {1});
  Tape tape;
  Tensor v = ipr::init_virtual(tape, g, assign, spec, store, rng);
  REQUIRE(v.rows() == 2);
  CHECK(v.data()[0] == doctest::Approx(14.0).epsilon(1e-12));
  CHECK(v.data()[1] == 0.0);
}

TEST_CASE("virtual init: random draws are reproducible from the rng") {
  ModelSpec spec = small_ds_spec();
  spec.virtual_init = VirtualInit::random;
  ParameterStore store;
  ipr::init_params(store, spec, 3);
  AttributedGraph g = path_graph(3, random_features(6, 3), 2);
  AssignmentMatrix assign(3, 3, 2, {{0, 1}, {0, 2}, {1, 2}});
  Tape tape;
  Rng r1 = Rng::derive(42, {7});
  Rng r2 = Rng::derive(42, {7});
  Tensor v1 = ipr::init_virtual(tape, g, assign, spec, store, r1);
  Tensor v2 = ipr::init_virtual(tape, g, assign, spec, store, r2);
  for (std::int64_t i = 0; i < v1.numel(); ++i) CHECK(v1.data()[i] == v2.data()[i]);
  bool any_nonzero = false;
  for (std::int64_t i = 0; i < v1.numel(); ++i) any_nonzero |= v1.data()[i] != 0.0;
  CHECK(any_nonzero);
}

TEST_CASE("aggregate to virtual: hand values") {
  ModelSpec spec;
  spec.d_in = 1;
  spec.d_hidden_down = 1;
  spec.d_hidden_virtual = 1;
  spec.m = 1;
  spec.k = 1;
  ParameterStore store;
  create_identity(store, "down.l0.pool.w", 1);
  create_zeros(store, "down.l0.pool.b", 1);

  ipr::HiddenState state;
  state.h = Tensor({2, 1}, {1.0, 2.0});
  Tape tape;

  SUBCASE("sum over both nodes assigned to the single virtual node") {
    AssignmentMatrix assign(2, 1, 1, {{0}, {0}});
    Tensor pooled = ipr::aggregate_to_virtual(tape, state, assign, spec, store);
    CHECK(pooled.data()[0] == doctest::Approx(3.0).epsilon(1e-12));
  }
  SUBCASE("single assignee passes its transformed embedding through") {
    spec.m = 2;
    AssignmentMatrix assign(2, 2, 1, {{0}, {1}});
    Tensor pooled = ipr::aggregate_to_virtual(tape, state, assign, spec, store);
    CHECK(pooled.data()[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(pooled.data()[1] == doctest::Approx(2.0).epsilon(1e-12));
  }
  SUBCASE("mean of two identical assignees equals one") {
    spec.agg_nodes = Agg::mean;
    state.h = Tensor({2, 1}, {5.0, 5.0});
    AssignmentMatrix assign(2, 1, 1, {{0}, {0}});
    Tensor pooled = ipr::aggregate_to_virtual(tape, state, assign, spec, store);
    CHECK(pooled.data()[0] == doctest::Approx(5.0).epsilon(1e-12));
  }
}

TEST_CASE("update virtual: the others-aggregate is exactly the other node") {
  // d_virtual = 1, UPDc weights select the others slot of the concatenation.
  ModelSpec spec;
  spec.d_in = 1;
  spec.d_hidden_virtual = 1;
  spec.m = 2;
  spec.k = 1;
  ParameterStore store;
  store.create("down.l0.upc.w1", {3, 1}, {0.0, 0.0, 1.0});
  create_zeros(store, "down.l0.upc.b1", 1);
  create_identity(store, "down.l0.upc.w2", 1);
  create_zeros(store, "down.l0.upc.b2", 1);

  ipr::HiddenState state;
  state.g = Tensor({2, 1}, {0.5, 0.25});
  Tensor pooled({2, 1}, {2.0, 7.0});
  Tape tape;
  Tensor g_new = ipr::update_virtual(tape, state, pooled, spec, store);
  CHECK(g_new.data()[0] == doctest::Approx(7.0).epsilon(1e-12));  // c=0 sees gbar_1
  CHECK(g_new.data()[1] == doctest::Approx(2.0).epsilon(1e-12));

  SUBCASE("m=1 aggregates an empty multiset to zero") {
    ModelSpec one = spec;
    one.m = 1;
    ipr::HiddenState s1;
    s1.g = Tensor({1, 1}, {0.5});
    Tensor p1({1, 1}, {9.0});
    Tensor out = ipr::update_virtual(tape, s1, p1, one, store);
    CHECK(out.data()[0] == 0.0);
  }
}

TEST_CASE("update virtual: identical inputs produce identical rows") {
  ModelSpec spec = small_ds_spec();
  ParameterStore store;
  ipr::init_params(store, spec, 17);
  ipr::HiddenState state;
  std::vector<double> grow = random_features(spec.d_hidden_virtual, 4);
  std::vector<double> prow = random_features(spec.d_hidden_virtual, 5);
  std::vector<double> gvals, pvals;
  for (std::int64_t c = 0; c < spec.m; ++c) {
    gvals.insert(gvals.end(), grow.begin(), grow.end());
    pvals.insert(pvals.end(), prow.begin(), prow.end());
  }
  state.g = Tensor({spec.m, spec.d_hidden_virtual}, gvals);
  Tensor pooled({spec.m, spec.d_hidden_virtual}, pvals);
  Tape tape;
  Tensor out = ipr::update_virtual(tape, state, pooled, spec, store);
  for (std::int64_t c = 1; c < spec.m; ++c) {
    for (std::int64_t d = 0; d < spec.d_hidden_virtual; ++d) {
      CHECK(out.data()[c * spec.d_hidden_virtual + d] == doctest::Approx(out.data()[d]));
    }
  }
}

TEST_CASE("update original: hand value on the two-node path") {
  // identity everything, sum AGG/DS: h'_0 = h_0 + h_1 + g_{a(0)}
  ModelSpec spec;
  spec.d_in = 1;
  spec.d_hidden_down = 1;
  spec.d_hidden_virtual = 1;
  spec.m = 2;
  spec.k = 1;
  ParameterStore store;
  create_identity_mlp(store, "down.l0.upd", 1);
  create_identity(store, "down.l0.ds.w", 1);
  create_zeros(store, "down.l0.ds.b", 1);

  AttributedGraph g = path_graph(2, {0.0, 0.0});
  AssignmentMatrix assign(2, 2, 1, {{0}, {1}});
  ipr::HiddenState state;
  state.h = Tensor({2, 1}, {1.0, 2.0});
  Tensor g_new({2, 1}, {10.0, 20.0});
  Tape tape;
  Tensor h_next = ipr::update_original(tape, state, g_new, g, assign, spec, store);
  CHECK(h_next.data()[0] == doctest::Approx(1.0 + 2.0 + 10.0).epsilon(1e-12));
  CHECK(h_next.data()[1] == doctest::Approx(2.0 + 1.0 + 20.0).epsilon(1e-12));
}

TEST_CASE("update original: zero virtual path reduces to the plain layer") {
  ModelSpec spec = small_ds_spec();
  spec.m = 2;
  spec.k = 1;
  ParameterStore store;
  ipr::init_params(store, spec, 23);
  // zero the distribute projection
  for (const std::string& name : {std::string("down.l0.ds.w"), std::string("down.l0.ds.b")}) {
    Tensor& v = store.value(name);
    std::fill(v.mutable_data(), v.mutable_data() + v.numel(), 0.0);
  }
  ModelSpec plain = spec;
  plain.ds_enabled = false;
  plain.readout_source = ReadoutSource::nodes;

  AttributedGraph g = path_graph(4, random_features(8, 6), 2);
  AssignmentMatrix assign(4, 2, 1, {{0}, {1}, {0}, {1}});
  ipr::HiddenState state;
  state.h = Tensor({4, spec.d_hidden_down}, random_features(4 * spec.d_hidden_down, 7));
  Tensor g_zero({2, spec.d_hidden_virtual});

  Tape tape;
  Tensor with_ds = ipr::update_original(tape, state, g_zero, g, assign, spec, store);
  Tensor without = ipr::update_original(tape, state, g_zero, g, assign, plain, store);
  for (std::int64_t i = 0; i < with_ds.numel(); ++i) {
    CHECK(with_ds.data()[i] == doctest::Approx(without.data()[i]).epsilon(1e-12));
  }
}

TEST_CASE("update original: isolated node hears only itself and its virtual node") {
  ModelSpec spec;
  spec.d_in = 1;
  spec.d_hidden_down = 1;
  spec.d_hidden_virtual = 1;
  spec.m = 2;
  spec.k = 1;
  ParameterStore store;
  create_identity_mlp(store, "down.l0.upd", 1);
  create_identity(store, "down.l0.ds.w", 1);
  create_zeros(store, "down.l0.ds.b", 1);

  AttributedGraph g(3, {{0, 1}}, Tensor({3, 1}, {0.0, 0.0, 0.0}));
  AssignmentMatrix assign(3, 2, 1, {{0}, {0}, {1}});
  ipr::HiddenState state;
  state.h = Tensor({3, 1}, {1.0, 2.0, 4.0});
  Tensor g_new({2, 1}, {10.0, 20.0});
  Tape tape;
  Tensor h_next = ipr::update_original(tape, state, g_new, g, assign, spec, store);
  // node 2 has no neighbors: h'_2 = h_2 + relu(0 + g_1)
  CHECK(h_next.data()[2] == doctest::Approx(4.0 + 20.0).epsilon(1e-12));

  // changing another node's state does not move the isolated node
  state.h = Tensor({3, 1}, {100.0, 2.0, 4.0});
  Tensor h_next2 = ipr::update_original(tape, state, g_new, g, assign, spec, store);
  CHECK(h_next2.data()[2] == h_next.data()[2]);
}

TEST_CASE("forward: one-node pipeline traced by hand") {
  // Single node with feature 2, m=1, k=1, one layer, identity parameters:
  //   h = 2; g0 = 1; pooled = relu(2) = 2; others = 0;
  //   g1 = relu(1 + 2 + 0) = 3; h' = 2 + relu(0 + 3) = 5; readout = 5.
  ModelSpec spec;
  spec.d_in = 1;
  spec.d_hidden_up = 1;
  spec.layers_up = 0;
  spec.d_hidden_down = 1;
  spec.d_hidden_virtual = 1;
  spec.layers_down = 1;
  spec.m = 1;
  spec.k = 1;
  spec.q = 1;
  spec.out_dim = 1;

  ParameterStore store;
  create_identity_mlp(store, "up.embed", 1);
  create_identity(store, "up.head.w", 1);
  create_zeros(store, "up.head.b", 1);
  store.create("vinit.id.w", {1, 1}, {1.0});
  create_identity(store, "down.embed.w", 1);
  create_zeros(store, "down.embed.b", 1);
  create_identity(store, "down.l0.pool.w", 1);
  create_zeros(store, "down.l0.pool.b", 1);
  store.create("down.l0.upc.w1", {3, 1}, {1.0, 1.0, 1.0});
  create_zeros(store, "down.l0.upc.b1", 1);
  create_identity(store, "down.l0.upc.w2", 1);
  create_zeros(store, "down.l0.upc.b2", 1);
  create_identity(store, "down.l0.ds.w", 1);
  create_zeros(store, "down.l0.ds.b", 1);
  create_identity_mlp(store, "down.l0.upd", 1);
  create_identity_mlp(store, "head", 1);

  AttributedGraph g(1, {}, Tensor({1, 1}, {2.0}));
  Tape tape;
  ipr::ForwardResult out = ipr::forward(tape, g, spec, store, 123);
  REQUIRE(out.prediction.rows() == 1);
  CHECK(out.prediction.data()[0] == doctest::Approx(5.0).epsilon(1e-12));
  REQUIRE(out.assignments.size() == 1);
  CHECK(out.assignments[0].rows[0] == std::vector<std::int32_t>{0});
}

TEST_CASE("forward: saturated priors make the output seed-independent") {
  ModelSpec spec = small_ds_spec();
  spec.q = 2;
  ParameterStore store;
  ipr::init_params(store, spec, 31);
  AttributedGraph g = cycle_graph(6, random_features(12, 8), 2);
  AssignmentMatrix target(6, 3, 2, {{0, 1}, {0, 2}, {1, 2}, {0, 1}, {0, 2}, {1, 2}});
  Tensor priors = saturated_priors(target);

  Tape t1, t2;
  ipr::ForwardResult r1 = ipr::forward_from_priors(t1, {&g}, priors, spec, store, 1);
  ipr::ForwardResult r2 = ipr::forward_from_priors(t2, {&g}, priors, spec, store, 999);
  REQUIRE(r1.prediction.numel() == spec.out_dim);
  for (std::int64_t i = 0; i < r1.prediction.numel(); ++i) {
    CHECK(r1.prediction.data()[i] == r2.prediction.data()[i]);
  }
  // both samples drew the target assignment, so the q-mean equals each sample
  REQUIRE(r1.sample_logits.rows() == 2);
  for (std::int64_t i = 0; i < spec.out_dim; ++i) {
    CHECK(r1.sample_logits.data()[i] ==
          doctest::Approx(r1.sample_logits.data()[spec.out_dim + i]).epsilon(1e-12));
    CHECK(r1.prediction.data()[i] == doctest::Approx(r1.sample_logits.data()[i]).epsilon(1e-12));
  }
  for (const AssignmentMatrix& a : r1.assignments) {
    for (std::int64_t v = 0; v < 6; ++v) {
      CHECK(a.rows[static_cast<std::size_t>(v)] == target.rows[static_cast<std::size_t>(v)]);
    }
  }
}

TEST_CASE("forward: permutation equivariance with deterministic assignments") {
  ModelSpec spec = small_ds_spec();
  spec.layers_down = 3;
  ParameterStore store;
  ipr::init_params(store, spec, 41);

  AttributedGraph g(7, {{0, 1}, {0, 2}, {1, 3}, {1, 4}, {2, 5}, {5, 6}},
                    Tensor({7, 2}, random_features(14, 9)));
  AssignmentMatrix assign(7, 3, 2, {{0, 1}, {0, 2}, {1, 2}, {0, 1}, {1, 2}, {0, 2}, {0, 1}});

  std::vector<std::int32_t> pi = {3, 6, 0, 5, 2, 4, 1};  // arbitrary permutation
  std::vector<std::pair<std::int32_t, std::int32_t>> edges;
  for (auto [u, v] : g.edges) {
    std::int32_t a = pi[static_cast<std::size_t>(u)], b = pi[static_cast<std::size_t>(v)];
    edges.emplace_back(std::min(a, b), std::max(a, b));
  }
  Tensor feats({7, 2});
  std::vector<std::vector<std::int32_t>> rows_p(7);
  for (std::int64_t v = 0; v < 7; ++v) {
    for (std::int64_t d = 0; d < 2; ++d) {
      feats.mutable_data()[pi[static_cast<std::size_t>(v)] * 2 + d] = g.features.data()[v * 2 + d];
    }
    rows_p[static_cast<std::size_t>(pi[static_cast<std::size_t>(v)])] =
        assign.rows[static_cast<std::size_t>(v)];
  }
  AttributedGraph gp(7, edges, feats);
  AssignmentMatrix assign_p(7, 3, 2, rows_p);

  Tape t1, t2;
  ipr::ForwardResult r1 = ipr::forward_from_priors(t1, {&g}, saturated_priors(assign), spec, store, 5);
  ipr::ForwardResult r2 =
      ipr::forward_from_priors(t2, {&gp}, saturated_priors(assign_p), spec, store, 55);
  for (std::int64_t i = 0; i < r1.prediction.numel(); ++i) {
    CHECK(r1.prediction.data()[i] == doctest::Approx(r2.prediction.data()[i]).epsilon(1e-9));
  }
}

TEST_CASE("forward: batched run equals per-graph runs") {
  ModelSpec spec = small_ds_spec();
  spec.q = 2;
  ParameterStore store;
  ipr::init_params(store, spec, 51);

  AttributedGraph g1 = path_graph(4, random_features(8, 11), 2);
  AttributedGraph g2 = cycle_graph(5, random_features(10, 12), 2);
  AssignmentMatrix a1(4, 3, 2, {{0, 1}, {1, 2}, {0, 2}, {0, 1}});
  AssignmentMatrix a2(5, 3, 2, {{0, 2}, {0, 1}, {1, 2}, {0, 1}, {1, 2}});

  Tensor p1 = saturated_priors(a1);
  Tensor p2 = saturated_priors(a2);
  std::vector<double> stacked(p1.data(), p1.data() + p1.numel());
  stacked.insert(stacked.end(), p2.data(), p2.data() + p2.numel());
  Tensor batch_priors({9, 3}, stacked);

  Tape tb, t1, t2;
  ipr::ForwardResult rb =
      ipr::forward_from_priors(tb, {&g1, &g2}, batch_priors, spec, store, 7);
  ipr::ForwardResult r1 = ipr::forward_from_priors(t1, {&g1}, p1, spec, store, 7);
  ipr::ForwardResult r2 = ipr::forward_from_priors(t2, {&g2}, p2, spec, store, 7);

  REQUIRE(rb.prediction.rows() == 2);
  for (std::int64_t i = 0; i < spec.out_dim; ++i) {
    CHECK(rb.prediction.data()[i] == doctest::Approx(r1.prediction.data()[i]).epsilon(1e-9));
    CHECK(rb.prediction.data()[spec.out_dim + i] ==
          doctest::Approx(r2.prediction.data()[i]).epsilon(1e-9));
  }
}

TEST_CASE("forward: composition matches the standalone phase operations") {
  ModelSpec spec = small_ds_spec();
  spec.layers_down = 1;
  ParameterStore store;
  ipr::init_params(store, spec, 61);

  AttributedGraph g = path_graph(5, random_features(10, 13), 2);
  Tape tf;
  ipr::ForwardResult out = ipr::forward(tf, g, spec, store, 77);
  REQUIRE(out.assignments.size() == 1);
  const AssignmentMatrix& assign = out.assignments[0];

  // replay the pipeline through the standalone ops on a fresh tape
  Tape tm;
  Tensor theta = ipr::upstream_priors(tm, g, spec, store);
  for (std::int64_t i = 0; i < theta.numel(); ++i) {
    CHECK(theta.data()[i] == doctest::Approx(out.priors.data()[i]).epsilon(1e-12));
  }
  ipr::HiddenState state;
  state.h = ipr::add_bias(ipr::matmul(tm.leaf(g.features), store.leaf(tm, "down.embed.w")),
                          store.leaf(tm, "down.embed.b"));
  Rng rng = Rng::derive(77, {0});
  state.g = ipr::init_virtual(tm, g, assign, spec, store, rng);
  Tensor pooled = ipr::aggregate_to_virtual(tm, state, assign, spec, store, 0);
  Tensor g_new = ipr::update_virtual(tm, state, pooled, spec, store, 0);
  Tensor h_new = ipr::update_original(tm, state, g_new, g, assign, spec, store, 0);
  ipr::RowGroups all;
  all.offsets = {0, 5};
  all.rows = {0, 1, 2, 3, 4};
  Tensor readout = ipr::group_reduce(h_new, all, ipr::Reduce::sum);
  Tensor hidden = ipr::relu(ipr::add_bias(ipr::matmul(readout, store.leaf(tm, "head.w1")),
                                          store.leaf(tm, "head.b1")));
  Tensor pred = ipr::add_bias(ipr::matmul(hidden, store.leaf(tm, "head.w2")),
                              store.leaf(tm, "head.b2"));
  for (std::int64_t i = 0; i < spec.out_dim; ++i) {
    CHECK(pred.data()[i] == doctest::Approx(out.prediction.data()[i]).epsilon(1e-9));
  }
}

TEST_CASE("forward: layer_norm params exist and the composition stays in lockstep") {
  ModelSpec spec = small_ds_spec();
  spec.layers_down = 1;
  spec.layer_norm = true;
  ParameterStore store;
  ipr::init_params(store, spec, 61);
  const std::vector<std::string> names = store.names();
  auto has = [&](const char* name) {
    return std::find(names.begin(), names.end(), name) != names.end();
  };
  CHECK(has("up.l0.ln.g"));
  CHECK(has("down.l0.upc.ln.g"));
  CHECK(has("down.l0.upd.ln.b"));

  AttributedGraph g = path_graph(5, random_features(10, 13), 2);
  Tape tf;
  ipr::ForwardResult out = ipr::forward(tf, g, spec, store, 77);
  REQUIRE(out.assignments.size() == 1);
  for (std::int64_t i = 0; i < out.prediction.numel(); ++i) {
    CHECK(std::isfinite(out.prediction.data()[i]));
  }

  // The standalone phase ops must place the normalization exactly where the
  // fused forward does.
  const AssignmentMatrix& assign = out.assignments[0];
  Tape tm;
  ipr::HiddenState state;
  state.h = ipr::add_bias(ipr::matmul(tm.leaf(g.features), store.leaf(tm, "down.embed.w")),
                          store.leaf(tm, "down.embed.b"));
  Rng rng = Rng::derive(77, {0});
  state.g = ipr::init_virtual(tm, g, assign, spec, store, rng);
  Tensor pooled = ipr::aggregate_to_virtual(tm, state, assign, spec, store, 0);
  Tensor g_new = ipr::update_virtual(tm, state, pooled, spec, store, 0);
  Tensor h_new = ipr::update_original(tm, state, g_new, g, assign, spec, store, 0);
  ipr::RowGroups all;
  all.offsets = {0, 5};
  all.rows = {0, 1, 2, 3, 4};
  Tensor readout = ipr::group_reduce(h_new, all, ipr::Reduce::sum);
  Tensor hidden = ipr::relu(ipr::add_bias(ipr::matmul(readout, store.leaf(tm, "head.w1")),
                                          store.leaf(tm, "head.b1")));
  Tensor pred = ipr::add_bias(ipr::matmul(hidden, store.leaf(tm, "head.w2")),
                              store.leaf(tm, "head.b2"));
  for (std::int64_t i = 0; i < spec.out_dim; ++i) {
    CHECK(pred.data()[i] == doctest::Approx(out.prediction.data()[i]).epsilon(1e-9));
  }
}

TEST_CASE("forward: under-reaching witness with and without the hierarchy") {
  const std::int64_t L = 2;
  ModelSpec spec;
  spec.d_in = 1;
  spec.d_hidden_up = 4;
  spec.layers_up = 1;
  spec.d_hidden_down = 8;
  spec.d_hidden_virtual = 8;
  spec.layers_down = L;
  spec.m = 2;
  spec.k = 1;
  spec.q = 1;
  spec.out_dim = 1;
  spec.readout_source = ReadoutSource::root;
  spec.ds_enabled = false;

  ParameterStore store_plain;
  ipr::init_params(store_plain, spec, 71);
  // tensor payloads are shared handles, so build the perturbed graph fresh
  AttributedGraph g = path_graph(L + 2, {0.3, 0.6, 0.9, 1.2});
  AttributedGraph g_far = path_graph(L + 2, {0.3, 0.6, 0.9, 2.2});

  Tape t1, t2;
  double base = ipr::forward(t1, g, spec, store_plain, 5).prediction.data()[0];
  double moved = ipr::forward(t2, g_far, spec, store_plain, 5).prediction.data()[0];
  CHECK(base == moved);  // node 0 cannot reach distance L+1 in L layers

  spec.ds_enabled = true;
  ParameterStore store_ds;
  ipr::init_params(store_ds, spec, 71);
  Tape t3, t4;
  double base_ds = ipr::forward(t3, g, spec, store_ds, 5).prediction.data()[0];
  double moved_ds = ipr::forward(t4, g_far, spec, store_ds, 5).prediction.data()[0];
  CHECK(std::abs(base_ds - moved_ds) > 1e-12);
}

TEST_CASE("forward: m=1 k=1 is the single fully-connected virtual node ablation") {
  ModelSpec spec = small_ds_spec();
  spec.m = 1;
  spec.k = 1;
  spec.q = 3;
  ParameterStore store;
  ipr::init_params(store, spec, 81);
  AttributedGraph g = cycle_graph(4, random_features(8, 14), 2);
  Tape tape;
  ipr::ForwardResult out = ipr::forward(tape, g, spec, store, 3);
  REQUIRE(out.assignments.size() == 3);
  for (const AssignmentMatrix& a : out.assignments) {
    for (std::int64_t v = 0; v < 4; ++v) {
      CHECK(a.rows[static_cast<std::size_t>(v)] == std::vector<std::int32_t>{0});
    }
  }
  for (std::int64_t i = 0; i < out.prediction.numel(); ++i) {
    CHECK(std::isfinite(out.prediction.data()[i]));
  }
}

TEST_CASE("forward: finite activations under N(0, 0.01) parameters") {
  ModelSpec spec;
  spec.d_in = 2;
  spec.d_edge = 2;
  spec.d_hidden_up = 6;
  spec.layers_up = 1;
  spec.d_hidden_down = 6;
  spec.d_hidden_virtual = 7;
  spec.layers_down = 3;
  spec.m = 4;
  spec.k = 2;
  spec.q = 2;
  spec.out_dim = 3;
  spec.virtual_init = VirtualInit::subgraph_mpnn;
  spec.readout_source = ReadoutSource::both;
  spec.agg_nodes = Agg::mean;
  spec.agg_virtual = Agg::max;
  spec.agg_neighbors = Agg::sum;
  spec.agg_distribute = Agg::mean;
  spec.readout_agg = Agg::mean;

  ParameterStore store;
  ipr::init_params(store, spec, 91);
  Rng rng = Rng::derive(91, {2});
  for (const std::string& name : store.names()) {
    Tensor& v = store.value(name);
    for (std::int64_t i = 0; i < v.numel(); ++i) v.mutable_data()[i] = 0.1 * rng.next_normal();
  }

  AttributedGraph cyc = cycle_graph(6, random_features(12, 15), 2);
  cyc.edge_features = Tensor({6, 2}, random_features(12, 16));
  AttributedGraph star(5, {{0, 1}, {0, 2}, {0, 3}, {0, 4}},
                       Tensor({5, 2}, random_features(10, 17)));
  star.edge_features = Tensor({4, 2}, random_features(8, 18));

  Tape tape;
  ipr::ForwardResult out = ipr::forward_batch(tape, {&cyc, &star}, spec, store, 13);
  REQUIRE(out.prediction.rows() == 2);
  for (std::int64_t i = 0; i < out.prediction.numel(); ++i) {
    CHECK(std::isfinite(out.prediction.data()[i]));
  }
  for (std::int64_t i = 0; i < out.priors.numel(); ++i) {
    CHECK(std::isfinite(out.priors.data()[i]));
  }
}

TEST_CASE("forward: relaxed mode gradients against finite differences") {
  ModelSpec spec;
  spec.d_in = 1;
  spec.d_hidden_up = 3;
  spec.layers_up = 1;
  spec.d_hidden_down = 3;
  spec.d_hidden_virtual = 3;
  spec.layers_down = 2;
  spec.m = 2;
  spec.k = 1;
  spec.q = 4;  // ignored in relaxed mode
  spec.out_dim = 1;
  spec.agg_distribute = Agg::mean;
  ParameterStore store;
  ipr::init_params(store, spec, 101);

  AttributedGraph g = path_graph(3, {0.4, 1.1, 0.7});
  Tensor x0({3, 2}, {0.3, -0.8, 1.4, 0.2, -0.5, 0.9});
  const double err = ipr::grad_check(
      [&](Tape& t, const Tensor& x) {
        ipr::ForwardResult out =
            ipr::forward_from_priors(t, {&g}, x, spec, store, 0, ForwardMode::relaxed);
        return ipr::reduce(out.prediction, ipr::Reduce::sum);
      },
      x0, 1e-5);
  CHECK(err < 2e-4);
}

TEST_CASE("forward: relaxed mode rejects non-smooth aggregator choices") {
  ModelSpec spec = small_ds_spec();
  spec.agg_nodes = Agg::max;
  ParameterStore store;
  ipr::init_params(store, spec, 103);
  AttributedGraph g = path_graph(3, random_features(6, 19), 2);
  Tape tape;
  CHECK_THROWS_AS(ipr::forward(tape, g, spec, store, 1, ForwardMode::relaxed),
                  std::invalid_argument);
}

TEST_CASE("count_message_ops hand values and linearity") {
  ModelSpec spec;
  spec.m = 2;
  spec.k = 1;
  AttributedGraph p2 = path_graph(2, {0.0, 0.0});
  CHECK(ipr::count_message_ops(p2, spec) == 8);  // 2*1 + 2 + 2 + 2

  AttributedGraph empty;
  empty.features = Tensor({0, 1});
  CHECK(ipr::count_message_ops(empty, spec) == spec.m * (spec.m - 1));

  ModelSpec spec2;
  spec2.m = 3;
  spec2.k = 2;
  AttributedGraph c8 = cycle_graph(8, std::vector<double>(8, 0.0));
  AttributedGraph c16 = cycle_graph(16, std::vector<double>(16, 0.0));
  const std::int64_t fixed = spec2.m * (spec2.m - 1);
  CHECK(ipr::count_message_ops(c16, spec2) - fixed ==
        2 * (ipr::count_message_ops(c8, spec2) - fixed));
}

TEST_CASE("forward rejects mismatched feature widths") {
  ModelSpec spec = small_ds_spec();  // d_in = 2
  ParameterStore store;
  ipr::init_params(store, spec, 107);
  AttributedGraph g = path_graph(3, {1.0, 2.0, 3.0});  // width 1
  Tape tape;
  CHECK_THROWS_WITH_AS(ipr::forward(tape, g, spec, store, 1),
                       doctest::Contains("does not match model d_in"), std::invalid_argument);

  ModelSpec espec = small_ds_spec();
  espec.d_edge = 2;
  ParameterStore estore;
  ipr::init_params(estore, espec, 108);
  AttributedGraph ge = path_graph(3, random_features(6, 20), 2);  // no edge features
  CHECK_THROWS_WITH_AS(ipr::forward(tape, ge, espec, estore, 1),
                       doctest::Contains("edge features"), std::invalid_argument);
}

}  // TEST_SUITE("model")
