#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <vector>

#include "ipr/exactk.hpp"
#include "ipr/rng.hpp"
#include "ipr/tape.hpp"

using namespace ipr;

namespace {

// Independent oracle: enumerate every k-subset of {0..m-1} and accumulate
// long-double products of w_j = exp(clamped logit).  Feasible for m <= 12,
// which is plenty to pin down the dynamic program.
struct Enumeration {
  long double partition = 0.0L;                               // e_k(w)
  std::vector<long double> marginals;                         // inclusion probs
  std::vector<std::pair<std::vector<std::int32_t>, long double>> subsets;  // normalized
};

Enumeration enumerate_exactly_k(const std::vector<double>& logits, std::int64_t k) {
  const int m = static_cast<int>(logits.size());
  const int kk = static_cast<int>(k);
  std::vector<long double> lw(logits.size());
  for (std::size_t j = 0; j < logits.size(); ++j) {
    lw[j] = static_cast<long double>(std::min(30.0, std::max(-30.0, logits[j])));
  }
  Enumeration e;
  e.marginals.assign(logits.size(), 0.0L);
  std::vector<std::int32_t> idx(static_cast<std::size_t>(kk));
  std::iota(idx.begin(), idx.end(), 0);
  while (true) {
    long double p = 1.0L;
    for (std::int32_t j : idx) p *= std::exp(lw[static_cast<std::size_t>(j)]);
    e.partition += p;
    for (std::int32_t j : idx) e.marginals[static_cast<std::size_t>(j)] += p;
    e.subsets.emplace_back(idx, p);
    int i = kk - 1;
    while (i >= 0 && idx[static_cast<std::size_t>(i)] == m - kk + i) --i;
    if (i < 0) break;
    ++idx[static_cast<std::size_t>(i)];
    for (int j = i + 1; j < kk; ++j) idx[static_cast<std::size_t>(j)] = idx[static_cast<std::size_t>(j - 1)] + 1;
  }
  for (auto& v : e.marginals) v /= e.partition;
  for (auto& s : e.subsets) s.second /= e.partition;
  return e;
}

std::vector<double> random_logits(std::int64_t m, double lo, double hi, Rng& rng) {
  std::vector<double> t(static_cast<std::size_t>(m));
  for (auto& v : t) v = rng.next_uniform(lo, hi);
  return t;
}

// Central finite differences of f(theta) = <u, mu(theta)>.
std::vector<double> fd_marginal_vjp(const std::vector<double>& logits, std::int64_t k,
                                    const std::vector<double>& upstream, double eps) {
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    std::vector<double> up = logits, dn = logits;
    up[i] += eps;
    dn[i] -= eps;
    const std::vector<double> mu_up = exactk::marginals(up, k);
    const std::vector<double> mu_dn = exactk::marginals(dn, k);
    double f_up = 0.0, f_dn = 0.0;
    for (std::size_t j = 0; j < upstream.size(); ++j) {
      f_up += upstream[j] * mu_up[j];
      f_dn += upstream[j] * mu_dn[j];
    }
    out[i] = (f_up - f_dn) / (2.0 * eps);
  }
  return out;
}

}  // namespace

TEST_SUITE_BEGIN("exactk");

TEST_CASE("log partition hand values") {
  // two items, one slot, uniform: Z = e_1(1, 1) = 2
  CHECK(exactk::log_partition({0.0, 0.0}, 1) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  // k = m: the single full subset, Z = prod w = exp(sum theta)
  CHECK(exactk::log_partition({0.3, -1.2, 2.5}, 3) == doctest::Approx(1.6).epsilon(1e-12));
  // single item
  CHECK(exactk::log_partition({0.75}, 1) == doctest::Approx(0.75).epsilon(1e-12));
  // w = (1,2,3,4), k = 2: e_2 = 2+3+4+6+8+12 = 35
  const std::vector<double> t = {0.0, std::log(2.0), std::log(3.0), std::log(4.0)};
  CHECK(exactk::log_partition(t, 2) == doctest::Approx(std::log(35.0)).epsilon(1e-12));
}

TEST_CASE("log partition matches subset enumeration") {
  Rng rng = Rng::derive(101, {0});
  for (int trial = 0; trial < 60; ++trial) {
    const std::int64_t m = 1 + static_cast<std::int64_t>(rng.next_below(10));
    const std::int64_t k = 1 + static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(m)));
    const double span = (trial % 3 == 0) ? 8.0 : 3.0;
    const std::vector<double> t = random_logits(m, -span, span, rng);
    const double lp = exactk::log_partition(t, k);
    const double oracle = static_cast<double>(std::log(enumerate_exactly_k(t, k).partition));
    CHECK(std::fabs(lp - oracle) <= 1e-10 * std::max(1.0, std::fabs(oracle)));
  }
  // clamping: logits beyond +-30 behave exactly like +-30
  const std::vector<double> wild = {45.0, -45.0, 1.0};
  const std::vector<double> edge = {30.0, -30.0, 1.0};
  CHECK(exactk::log_partition(wild, 2) == doctest::Approx(exactk::log_partition(edge, 2)).epsilon(1e-14));
}

TEST_CASE("input validation") {
  CHECK_THROWS_WITH_AS(exactk::log_partition({0.0, 0.0}, 0), doctest::Contains("1 <= k <= m"),
                       std::invalid_argument);
  CHECK_THROWS_AS(exactk::log_partition({0.0, 0.0}, 3), std::invalid_argument);
  CHECK_THROWS_WITH_AS(exactk::marginals({0.0, std::nan("")}, 1), doctest::Contains("finite"),
                       std::invalid_argument);
  Rng rng = Rng::derive(1, {});
  CHECK_THROWS_AS(exactk::sample_row({1.0}, 2, rng), std::invalid_argument);
  CHECK_THROWS_AS(exactk::marginal_jacobian_vp({0.0, 0.0}, 1, {1.0}), std::invalid_argument);
  CHECK_THROWS_AS(exactk::sample_assignment(Tensor({4}), 1, 0, 0, 0), std::invalid_argument);
  CHECK_THROWS_AS(exactk::relaxed_assignment(Tensor({2, 3}), 0), std::invalid_argument);
}

TEST_CASE("marginal hand values") {
  const std::vector<double> uniform2 = exactk::marginals({0.0, 0.0}, 1);
  CHECK(uniform2[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(uniform2[1] == doctest::Approx(0.5).epsilon(1e-12));

  // k = m forces every item in
  for (double mu : exactk::marginals({1.0, -2.0, 0.25, 3.0}, 4)) {
    CHECK(mu == doctest::Approx(1.0).epsilon(1e-12));
  }

  // w = (1,2,3,4), k = 2: mu_j = w_j e_1(w without j) / 35
  const std::vector<double> t = {0.0, std::log(2.0), std::log(3.0), std::log(4.0)};
  const std::vector<double> mu = exactk::marginals(t, 2);
  CHECK(mu[0] == doctest::Approx(9.0 / 35.0).epsilon(1e-12));
  CHECK(mu[1] == doctest::Approx(16.0 / 35.0).epsilon(1e-12));
  CHECK(mu[2] == doctest::Approx(21.0 / 35.0).epsilon(1e-12));
  CHECK(mu[3] == doctest::Approx(24.0 / 35.0).epsilon(1e-12));
}

TEST_CASE("marginals match subset enumeration") {
  Rng rng = Rng::derive(102, {0});
  for (int trial = 0; trial < 60; ++trial) {
    const std::int64_t m = 1 + static_cast<std::int64_t>(rng.next_below(10));
    const std::int64_t k = 1 + static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(m)));
    const std::vector<double> t = random_logits(m, -4.0, 4.0, rng);
    const std::vector<double> mu = exactk::marginals(t, k);
    const Enumeration e = enumerate_exactly_k(t, k);
    for (std::size_t j = 0; j < mu.size(); ++j) {
      CHECK(std::fabs(mu[j] - static_cast<double>(e.marginals[j])) <= 1e-10);
    }
  }
}

TEST_CASE("marginals sum to k and stay in [0,1], even at the clamp boundary") {
  Rng rng = Rng::derive(103, {0});
  std::vector<std::vector<double>> cases;
  for (int trial = 0; trial < 30; ++trial) {
    cases.push_back(random_logits(2 + static_cast<std::int64_t>(rng.next_below(11)), -6.0, 6.0, rng));
  }
  cases.push_back({30.0, 30.0, -30.0, -30.0, 0.0});
  cases.push_back({30.0, 30.0, 30.0, 30.0});
  cases.push_back({-30.0, -30.0, -30.0});
  for (const auto& t : cases) {
    const std::int64_t m = static_cast<std::int64_t>(t.size());
    for (std::int64_t k = 1; k <= m; ++k) {
      const std::vector<double> mu = exactk::marginals(t, k);
      double sum = 0.0;
      for (double v : mu) {
        CHECK(v >= -1e-12);
        CHECK(v <= 1.0 + 1e-12);
        sum += v;
      }
      CHECK(std::fabs(sum - static_cast<double>(k)) <= 1e-9);
    }
  }
}

TEST_CASE("marginals are invariant under a common logit shift") {
  Rng rng = Rng::derive(104, {0});
  const std::vector<double> t = random_logits(6, -2.0, 2.0, rng);
  std::vector<double> shifted = t;
  for (auto& v : shifted) v += 0.7;
  for (std::int64_t k = 1; k <= 5; ++k) {
    const std::vector<double> a = exactk::marginals(t, k);
    const std::vector<double> b = exactk::marginals(shifted, k);
    for (std::size_t j = 0; j < a.size(); ++j) CHECK(std::fabs(a[j] - b[j]) <= 1e-12);
  }
}

TEST_CASE("raising one logit raises its marginal and lowers the others") {
  const std::vector<double> t = {0.2, -0.5, 1.0, 0.0, -1.3};
  for (std::int64_t k = 1; k <= 4; ++k) {
    const std::vector<double> base = exactk::marginals(t, k);
    for (std::size_t j = 0; j < t.size(); ++j) {
      std::vector<double> bumped = t;
      bumped[j] += 0.5;
      const std::vector<double> mu = exactk::marginals(bumped, k);
      CHECK(mu[j] > base[j]);
      for (std::size_t i = 0; i < t.size(); ++i) {
        if (i != j) CHECK(mu[i] < base[i]);
      }
    }
  }
}

TEST_CASE("sampler draws valid subsets deterministically") {
  const std::vector<double> t = {0.4, -1.0, 0.0, 2.0, -0.3};
  for (int rep = 0; rep < 20; ++rep) {
    Rng a = Rng::derive(7, {static_cast<std::uint64_t>(rep)});
    Rng b = Rng::derive(7, {static_cast<std::uint64_t>(rep)});
    const std::vector<std::int32_t> sa = exactk::sample_row(t, 3, a);
    const std::vector<std::int32_t> sb = exactk::sample_row(t, 3, b);
    CHECK(sa == sb);
    REQUIRE(sa.size() == 3);
    CHECK(std::is_sorted(sa.begin(), sa.end()));
    CHECK(std::adjacent_find(sa.begin(), sa.end()) == sa.end());
    CHECK(sa.front() >= 0);
    CHECK(sa.back() < 5);
  }

  // saturation: k = m has a single support point
  Rng rng = Rng::derive(8, {});
  const std::vector<std::int32_t> full = exactk::sample_row(t, 5, rng);
  CHECK(full == std::vector<std::int32_t>{0, 1, 2, 3, 4});

  // a +30 vs -30 gap concentrates all mass on one item
  const std::vector<double> spiked = {30.0, -30.0, -30.0, -30.0};
  for (int rep = 0; rep < 200; ++rep) {
    Rng r = Rng::derive(9, {static_cast<std::uint64_t>(rep)});
    CHECK(exactk::sample_row(spiked, 1, r) == std::vector<std::int32_t>{0});
  }
}

TEST_CASE("sampling frequencies track the exact distribution") {
  const std::vector<double> t = {0.8, -0.4, 0.1, -1.1, 0.6};
  const std::int64_t k = 2;
  const Enumeration e = enumerate_exactly_k(t, k);
  const int N = 20000;

  std::vector<int> inclusion(t.size(), 0);
  std::map<std::vector<std::int32_t>, int> subset_counts;
  for (int rep = 0; rep < N; ++rep) {
    Rng r = Rng::derive(11, {static_cast<std::uint64_t>(rep)});
    const std::vector<std::int32_t> s = exactk::sample_row(t, k, r);
    for (std::int32_t j : s) ++inclusion[static_cast<std::size_t>(j)];
    ++subset_counts[s];
  }
  for (std::size_t j = 0; j < t.size(); ++j) {
    const double p = static_cast<double>(e.marginals[j]);
    const double sigma = std::sqrt(p * (1.0 - p) / N);
    CHECK(std::fabs(inclusion[j] / static_cast<double>(N) - p) <= 4.0 * sigma);
  }
  for (const auto& [subset, p_ld] : e.subsets) {
    const double p = static_cast<double>(p_ld);
    const double sigma = std::sqrt(p * (1.0 - p) / N);
    const auto it = subset_counts.find(subset);
    const double freq = (it == subset_counts.end() ? 0.0 : it->second) / static_cast<double>(N);
    CHECK(std::fabs(freq - p) <= 4.0 * sigma);
  }
}

TEST_CASE("assignment sampling is reproducible per (seed, graph, sample, row)") {
  Tensor priors({3, 4}, {0.1, -0.2, 0.3, 0.0, 1.0, -1.0, 0.5, 0.25, -0.7, 0.2, 0.0, 0.9});
  const AssignmentMatrix a = exactk::sample_assignment(priors, 2, 42, 5, 3);
  const AssignmentMatrix b = exactk::sample_assignment(priors, 2, 42, 5, 3);
  CHECK(a.rows == b.rows);
  CHECK(a.n == 3);
  CHECK(a.m == 4);
  CHECK(a.k == 2);

  bool any_diff = false;
  for (std::uint64_t s = 0; s < 8 && !any_diff; ++s) {
    any_diff = exactk::sample_assignment(priors, 2, 42, 5, 100 + s).rows != a.rows;
  }
  CHECK(any_diff);
}

TEST_CASE("uniform one-of-four assignment is unbiased across sample streams") {
  Tensor priors({1, 4});
  const int N = 8000;
  std::vector<int> counts(4, 0);
  for (int s = 0; s < N; ++s) {
    const AssignmentMatrix a = exactk::sample_assignment(priors, 1, 77, 0, static_cast<std::uint64_t>(s));
    ++counts[static_cast<std::size_t>(a.rows[0][0])];
  }
  // 3 sigma around N/4 with sigma = sqrt(N p (1-p))
  const double sigma = std::sqrt(N * 0.25 * 0.75);
  for (int c = 0; c < 4; ++c) {
    CHECK(std::fabs(counts[static_cast<std::size_t>(c)] - N / 4.0) <= 3.0 * sigma);
  }
}

TEST_CASE("jacobian-vector products: zero and constant upstreams") {
  const std::vector<double> t = {0.3, -0.8, 1.2, 0.05};
  const std::vector<double> zero(4, 0.0);
  for (double g : exactk::marginal_jacobian_vp(t, 2, zero)) CHECK(g == 0.0);

  // sum of marginals is constant (= k), so a constant upstream annihilates
  const std::vector<double> ones(4, 1.0);
  for (double g : exactk::marginal_jacobian_vp(t, 2, ones)) {
    CHECK(std::fabs(g) <= 1e-12);
  }
}

TEST_CASE("jacobian-vector products match central differences") {
  Rng rng = Rng::derive(105, {0});
  for (int trial = 0; trial < 40; ++trial) {
    const std::int64_t m = 2 + static_cast<std::int64_t>(rng.next_below(7));
    const std::int64_t k = 1 + static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(m)));
    const std::vector<double> t = random_logits(m, -2.0, 2.0, rng);
    const std::vector<double> u = random_logits(m, -1.0, 1.0, rng);
    const std::vector<double> analytic = exactk::marginal_jacobian_vp(t, k, u);
    const std::vector<double> fd = fd_marginal_vjp(t, k, u, 1e-5);
    for (std::size_t j = 0; j < analytic.size(); ++j) {
      CHECK(std::fabs(analytic[j] - fd[j]) <= 1e-7 + 1e-6 * std::fabs(fd[j]));
    }
  }
}

TEST_CASE("clamped logits get zero gradient") {
  const std::vector<double> t = {31.0, 0.5, -33.0};
  const std::vector<double> u = {0.3, -0.9, 1.7};
  const std::vector<double> g = exactk::marginal_jacobian_vp(t, 1, u);
  CHECK(g[0] == 0.0);
  CHECK(g[2] == 0.0);
  CHECK(g[1] != 0.0);
}

TEST_CASE("straight-through samples carry the drawn structure as binary weights") {
  Tape tape;
  Tensor priors = tape.leaf(Tensor({3, 5}, {0.1, -0.2, 0.3, 0.0, 0.7,
                                            1.0, -1.0, 0.5, 0.25, -0.5,
                                            -0.7, 0.2, 0.0, 0.9, 0.4}));
  const auto samples = exactk::straight_through_assign(tape, priors, 2, 3, 13, 0);
  REQUIRE(samples.size() == 3);
  for (const auto& s : samples) {
    CHECK(s.structure.n == 3);
    CHECK(s.structure.k == 2);
    CHECK(s.weights.shape() == Shape{3, 5});
    CHECK(s.weights.on_tape());
    for (std::int64_t v = 0; v < 3; ++v) {
      double row_sum = 0.0;
      for (std::int64_t j = 0; j < 5; ++j) {
        const double w = s.weights.at(v, j);
        CHECK((w == 0.0 || w == 1.0));
        row_sum += w;
      }
      CHECK(row_sum == 2.0);
      for (std::int32_t j : s.structure.rows[static_cast<std::size_t>(v)]) {
        CHECK(s.weights.at(v, j) == 1.0);
      }
    }
  }
  // matching the row streams of the standalone sampler
  const AssignmentMatrix direct = exactk::sample_assignment(priors, 2, 13, 0, 1);
  CHECK(samples[1].structure.rows == direct.rows);
}

TEST_CASE("straight-through backward is the marginal jacobian, sample count times") {
  const Tensor theta({2, 4}, {0.3, -0.8, 1.2, 0.05, -0.4, 0.6, 0.0, 1.5});
  const Tensor cost({2, 4}, {1.0, -2.0, 0.5, 0.25, -1.0, 0.75, 2.0, -0.5});

  auto run = [&](std::int64_t q, std::uint64_t seed) {
    Tape tape;
    Tensor leaf = tape.leaf(theta);
    const auto samples = exactk::straight_through_assign(tape, leaf, 2, q, seed, 0);
    Tensor loss = reduce(mul(samples[0].weights, cost), Reduce::sum);
    for (std::size_t s = 1; s < samples.size(); ++s) {
      loss = add(loss, reduce(mul(samples[s].weights, cost), Reduce::sum));
    }
    tape.backward(loss);
    return tape.grad(leaf);
  };

  const std::vector<double> g1 = run(1, 21);
  for (std::int64_t v = 0; v < 2; ++v) {
    std::vector<double> row(4), c(4);
    for (std::int64_t j = 0; j < 4; ++j) {
      row[static_cast<std::size_t>(j)] = theta.at(v, j);
      c[static_cast<std::size_t>(j)] = cost.at(v, j);
    }
    const std::vector<double> vjp = exactk::marginal_jacobian_vp(row, 2, c);
    for (std::int64_t j = 0; j < 4; ++j) {
      CHECK(g1[static_cast<std::size_t>(v * 4 + j)] == doctest::Approx(vjp[static_cast<std::size_t>(j)]).epsilon(1e-12));
    }
  }

  // summing q sample losses scales the gradient by q exactly
  const std::vector<double> g3 = run(3, 21);
  for (std::size_t i = 0; i < g1.size(); ++i) {
    CHECK(g3[i] == doctest::Approx(3.0 * g1[i]).epsilon(1e-12));
  }

  // the gradient depends on the logits, not on which subsets were drawn
  const std::vector<double> g_other_seed = run(1, 9999);
  for (std::size_t i = 0; i < g1.size(); ++i) CHECK(g1[i] == g_other_seed[i]);
}

TEST_CASE("straight-through gradient matches finite differences of the expected loss") {
  const Tensor theta({2, 3}, {0.2, -0.6, 0.9, 1.1, 0.0, -0.3});
  const Tensor cost({2, 3}, {0.7, -1.2, 0.4, -0.9, 1.3, 0.6});
  const std::int64_t k = 2;

  Tape tape;
  Tensor leaf = tape.leaf(theta);
  const auto samples = exactk::straight_through_assign(tape, leaf, k, 1, 3, 0);
  tape.backward(reduce(mul(samples[0].weights, cost), Reduce::sum));
  const std::vector<double> analytic = tape.grad(leaf);

  const double eps = 1e-5;
  for (std::int64_t v = 0; v < 2; ++v) {
    for (std::int64_t j = 0; j < 3; ++j) {
      auto expected_loss = [&](double bump) {
        double total = 0.0;
        for (std::int64_t r = 0; r < 2; ++r) {
          std::vector<double> row(3);
          for (std::int64_t c = 0; c < 3; ++c) row[static_cast<std::size_t>(c)] = theta.at(r, c);
          if (r == v) row[static_cast<std::size_t>(j)] += bump;
          const std::vector<double> mu = exactk::marginals(row, k);
          for (std::int64_t c = 0; c < 3; ++c) total += cost.at(r, c) * mu[static_cast<std::size_t>(c)];
        }
        return total;
      };
      const double fd = (expected_loss(eps) - expected_loss(-eps)) / (2.0 * eps);
      const double a = analytic[static_cast<std::size_t>(v * 3 + j)];
      CHECK(std::fabs(a - fd) <= 1e-7 + 1e-6 * std::fabs(fd));
    }
  }
}

TEST_CASE("relaxed assignment reproduces the marginals") {
  Tensor priors({3, 5}, {0.1, -0.2, 0.3, 0.0, 0.7,
                         1.0, -1.0, 0.5, 0.25, -0.5,
                         -0.7, 0.2, 0.0, 0.9, 0.4});
  for (std::int64_t k : {1, 2, 4, 5}) {
    const Tensor mu = exactk::relaxed_assignment(priors, k);
    REQUIRE(mu.shape() == Shape{3, 5});
    for (std::int64_t v = 0; v < 3; ++v) {
      std::vector<double> row(5);
      for (std::int64_t j = 0; j < 5; ++j) row[static_cast<std::size_t>(j)] = priors.at(v, j);
      const std::vector<double> expect = exactk::marginals(row, k);
      double sum = 0.0;
      for (std::int64_t j = 0; j < 5; ++j) {
        CHECK(mu.at(v, j) == doctest::Approx(expect[static_cast<std::size_t>(j)]).epsilon(1e-10));
        sum += mu.at(v, j);
      }
      CHECK(sum == doctest::Approx(static_cast<double>(k)).epsilon(1e-9));
    }
  }
}

TEST_CASE("relaxed assignment differentiates through the dynamic program") {
  const Tensor cost({2, 4}, {1.0, -2.0, 0.5, 0.25, -1.0, 0.75, 2.0, -0.5});
  const Tensor x0({2, 4}, {0.3, -0.8, 1.2, 0.05, -0.4, 0.6, 0.0, 1.5});
  for (std::int64_t k : {1, 2, 3}) {
    const double err = grad_check(
        [&](Tape&, const Tensor& x) {
          return reduce(mul(exactk::relaxed_assignment(x, k), cost), Reduce::sum);
        },
        x0, 1e-4);
    CHECK(err < 1e-6);
  }
}

TEST_CASE("relaxed and straight-through gradients agree") {
  // Both paths compute d<cost, mu>/d theta: one from tape scalars through the
  // dynamic program, the other from the hand-derived reverse sweep.
  const Tensor theta({2, 4}, {0.3, -0.8, 1.2, 0.05, -0.4, 0.6, 0.0, 1.5});
  const Tensor cost({2, 4}, {1.0, -2.0, 0.5, 0.25, -1.0, 0.75, 2.0, -0.5});
  for (std::int64_t k : {1, 2, 3}) {
    Tape relaxed_tape;
    Tensor leaf_r = relaxed_tape.leaf(theta);
    relaxed_tape.backward(reduce(mul(exactk::relaxed_assignment(leaf_r, k), cost), Reduce::sum));
    const std::vector<double> g_relaxed = relaxed_tape.grad(leaf_r);

    Tape st_tape;
    Tensor leaf_s = st_tape.leaf(theta);
    const auto samples = exactk::straight_through_assign(st_tape, leaf_s, k, 1, 5, 0);
    st_tape.backward(reduce(mul(samples[0].weights, cost), Reduce::sum));
    const std::vector<double> g_st = st_tape.grad(leaf_s);

    for (std::size_t i = 0; i < g_relaxed.size(); ++i) {
      CHECK(std::fabs(g_relaxed[i] - g_st[i]) <= 1e-8);
    }
  }
}

TEST_SUITE_END();
