#include "ipr/exactk.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace ipr {
namespace exactk {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double lae(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::fabs(a - b)));
}

void check_inputs(const std::vector<double>& logits, std::int64_t k, const char* op) {
  const std::int64_t m = static_cast<std::int64_t>(logits.size());
  if (k < 1 || k > m) {
    throw std::invalid_argument(std::string(op) + " needs 1 <= k <= m, got k=" + std::to_string(k) +
                                ", m=" + std::to_string(m));
  }
  for (double t : logits) {
    if (!std::isfinite(t)) throw NonFiniteLogits(std::string(op) + ": logits must be finite");
  }
}

std::vector<double> clamp_logits(const std::vector<double>& logits) {
  std::vector<double> lw(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    lw[i] = std::min(kLogitClamp, std::max(-kLogitClamp, logits[i]));
  }
  return lw;
}

// Row-major (m+1) x (k+1) table access.
struct Table {
  std::vector<double> v;
  std::int64_t cols;
  Table(std::int64_t rows, std::int64_t cols_, double fill) : v(static_cast<std::size_t>(rows * cols_), fill), cols(cols_) {}
  double& at(std::int64_t r, std::int64_t c) { return v[static_cast<std::size_t>(r * cols + c)]; }
  double at(std::int64_t r, std::int64_t c) const { return v[static_cast<std::size_t>(r * cols + c)]; }
};

// LF[i][t] = log e_t(w_1..w_i); row 0 is the empty-prefix base case.
Table prefix_table(const std::vector<double>& lw, std::int64_t k) {
  const std::int64_t m = static_cast<std::int64_t>(lw.size());
  Table LF(m + 1, k + 1, kNegInf);
  LF.at(0, 0) = 0.0;
  for (std::int64_t i = 1; i <= m; ++i) {
    LF.at(i, 0) = 0.0;
    const std::int64_t tmax = std::min(i, k);
    for (std::int64_t t = 1; t <= tmax; ++t) {
      LF.at(i, t) = lae(LF.at(i - 1, t), lw[static_cast<std::size_t>(i - 1)] + LF.at(i - 1, t - 1));
    }
  }
  return LF;
}

// LS[i][t] = log e_t(w_i..w_m), 1-based i with row m+1 the empty-suffix base.
Table suffix_table(const std::vector<double>& lw, std::int64_t k) {
  const std::int64_t m = static_cast<std::int64_t>(lw.size());
  Table LS(m + 2, k + 1, kNegInf);
  LS.at(m + 1, 0) = 0.0;
  for (std::int64_t i = m; i >= 1; --i) {
    LS.at(i, 0) = 0.0;
    const std::int64_t tmax = std::min(m - i + 1, k);
    for (std::int64_t t = 1; t <= tmax; ++t) {
      LS.at(i, t) = lae(LS.at(i + 1, t), lw[static_cast<std::size_t>(i - 1)] + LS.at(i + 1, t - 1));
    }
  }
  return LS;
}

}  // namespace

double log_partition(const std::vector<double>& logits, std::int64_t k) {
  check_inputs(logits, k, "log_partition");
  const std::vector<double> lw = clamp_logits(logits);
  Table LF = prefix_table(lw, k);
  return LF.at(static_cast<std::int64_t>(lw.size()), k);
}

std::vector<double> marginals(const std::vector<double>& logits, std::int64_t k) {
  check_inputs(logits, k, "marginals");
  const std::int64_t m = static_cast<std::int64_t>(logits.size());
  const std::vector<double> lw = clamp_logits(logits);
  Table LF = prefix_table(lw, k);
  Table LS = suffix_table(lw, k);
  const double logZ = LF.at(m, k);
  std::vector<double> mu(static_cast<std::size_t>(m));
  for (std::int64_t j = 1; j <= m; ++j) {
    // log e_{k-1}(w without item j) via prefix/suffix split around j.
    double acc = kNegInf;
    for (std::int64_t t = 0; t <= k - 1; ++t) {
      acc = lae(acc, LF.at(j - 1, t) + LS.at(j + 1, k - 1 - t));
    }
    mu[static_cast<std::size_t>(j - 1)] = std::exp(lw[static_cast<std::size_t>(j - 1)] + acc - logZ);
  }
  return mu;
}

std::vector<std::int32_t> sample_row(const std::vector<double>& logits, std::int64_t k, Rng& rng) {
  check_inputs(logits, k, "sample_row");
  const std::int64_t m = static_cast<std::int64_t>(logits.size());
  const std::vector<double> lw = clamp_logits(logits);
  Table LF = prefix_table(lw, k);
  std::vector<std::int32_t> chosen;
  chosen.reserve(static_cast<std::size_t>(k));
  std::int64_t t = k;
  for (std::int64_t i = m; i >= 1 && t > 0; --i) {
    // P(include item i | t of the first i still to choose).
    double p = std::exp(lw[static_cast<std::size_t>(i - 1)] + LF.at(i - 1, t - 1) - LF.at(i, t));
    if (rng.next_double() < p) {
      chosen.push_back(static_cast<std::int32_t>(i - 1));
      --t;
    }
  }
  if (t != 0) {
    throw std::runtime_error("exactly-k sampler failed to place " + std::to_string(t) + " items");
  }
  std::reverse(chosen.begin(), chosen.end());
  return chosen;
}

AssignmentMatrix sample_assignment(const Tensor& priors, std::int64_t k, std::uint64_t seed,
                                   std::uint64_t graph_index, std::uint64_t sample_index) {
  if (priors.rank() != 2) {
    throw std::invalid_argument("priors must be [n x m], got shape " + shape_str(priors.shape()));
  }
  const std::int64_t n = priors.rows(), m = priors.cols();
  std::vector<std::vector<std::int32_t>> rows(static_cast<std::size_t>(n));
  std::vector<double> row(static_cast<std::size_t>(m));
  for (std::int64_t v = 0; v < n; ++v) {
    for (std::int64_t j = 0; j < m; ++j) row[static_cast<std::size_t>(j)] = priors.at(v, j);
    Rng rng = Rng::derive(seed, {graph_index, sample_index, static_cast<std::uint64_t>(v)});
    rows[static_cast<std::size_t>(v)] = sample_row(row, k, rng);
  }
  return AssignmentMatrix(n, m, k, std::move(rows));
}

std::vector<double> marginal_jacobian_vp(const std::vector<double>& logits, std::int64_t k,
                                         const std::vector<double>& upstream) {
  check_inputs(logits, k, "marginal_jacobian_vp");
  const std::int64_t m = static_cast<std::int64_t>(logits.size());
  if (static_cast<std::int64_t>(upstream.size()) != m) {
    throw std::invalid_argument("marginal_jacobian_vp upstream has " + std::to_string(upstream.size()) +
                                " entries for m=" + std::to_string(m));
  }
  const std::vector<double> lw = clamp_logits(logits);
  Table LF = prefix_table(lw, k);
  Table LS = suffix_table(lw, k);
  const double logZ = LF.at(m, k);

  // Reverse sweep over the log-space program.  Adjoints accumulate per table
  // cell; softmax weights exp(term - total) distribute each logaddexp adjoint.
  Table aLF(m + 1, k + 1, 0.0);
  Table aLS(m + 2, k + 1, 0.0);
  std::vector<double> alw(static_cast<std::size_t>(m), 0.0);

  for (std::int64_t j = 1; j <= m; ++j) {
    double acc = kNegInf;
    for (std::int64_t t = 0; t <= k - 1; ++t) acc = lae(acc, LF.at(j - 1, t) + LS.at(j + 1, k - 1 - t));
    const double mu = std::exp(lw[static_cast<std::size_t>(j - 1)] + acc - logZ);
    const double amu = upstream[static_cast<std::size_t>(j - 1)] * mu;  // adjoint of log mu_j
    if (amu == 0.0) continue;
    alw[static_cast<std::size_t>(j - 1)] += amu;
    aLF.at(m, k) -= amu;
    if (acc == kNegInf) continue;
    for (std::int64_t t = 0; t <= k - 1; ++t) {
      double term = LF.at(j - 1, t) + LS.at(j + 1, k - 1 - t);
      if (term == kNegInf) continue;
      double w = std::exp(term - acc);
      aLF.at(j - 1, t) += amu * w;
      aLS.at(j + 1, k - 1 - t) += amu * w;
    }
  }

  // Prefix table was filled with i ascending; sweep it in reverse.
  for (std::int64_t i = m; i >= 1; --i) {
    const std::int64_t tmax = std::min(i, k);
    for (std::int64_t t = tmax; t >= 1; --t) {
      double a = aLF.at(i, t);
      if (a == 0.0 || LF.at(i, t) == kNegInf) continue;
      double w1 = LF.at(i - 1, t) == kNegInf ? 0.0 : std::exp(LF.at(i - 1, t) - LF.at(i, t));
      double w2 = LF.at(i - 1, t - 1) == kNegInf
                      ? 0.0
                      : std::exp(lw[static_cast<std::size_t>(i - 1)] + LF.at(i - 1, t - 1) - LF.at(i, t));
      aLF.at(i - 1, t) += a * w1;
      aLF.at(i - 1, t - 1) += a * w2;
      alw[static_cast<std::size_t>(i - 1)] += a * w2;
    }
  }

  // Suffix table was filled with i descending; sweep it ascending.
  for (std::int64_t i = 1; i <= m; ++i) {
    const std::int64_t tmax = std::min(m - i + 1, k);
    for (std::int64_t t = tmax; t >= 1; --t) {
      double a = aLS.at(i, t);
      if (a == 0.0 || LS.at(i, t) == kNegInf) continue;
      double w1 = LS.at(i + 1, t) == kNegInf ? 0.0 : std::exp(LS.at(i + 1, t) - LS.at(i, t));
      double w2 = LS.at(i + 1, t - 1) == kNegInf
                      ? 0.0
                      : std::exp(lw[static_cast<std::size_t>(i - 1)] + LS.at(i + 1, t - 1) - LS.at(i, t));
      aLS.at(i + 1, t) += a * w1;
      aLS.at(i + 1, t - 1) += a * w2;
      alw[static_cast<std::size_t>(i - 1)] += a * w2;
    }
  }

  // Clamp: gradient passes only strictly inside the interval.
  std::vector<double> out(static_cast<std::size_t>(m), 0.0);
  for (std::int64_t j = 0; j < m; ++j) {
    if (logits[static_cast<std::size_t>(j)] > -kLogitClamp && logits[static_cast<std::size_t>(j)] < kLogitClamp) {
      out[static_cast<std::size_t>(j)] = alw[static_cast<std::size_t>(j)];
    }
  }
  return out;
}

std::vector<AssignmentSample> straight_through_assign(Tape& tape, const Tensor& priors,
                                                      std::int64_t k, std::int64_t q,
                                                      std::uint64_t seed, std::uint64_t graph_index) {
  if (priors.rank() != 2) {
    throw std::invalid_argument("priors must be [n x m], got shape " + shape_str(priors.shape()));
  }
  if (q < 1) throw std::invalid_argument("straight_through_assign needs q >= 1");
  const std::int64_t n = priors.rows(), m = priors.cols();
  if (k < 1 || k > m) {
    throw std::invalid_argument("straight_through_assign needs 1 <= k <= m, got k=" + std::to_string(k) +
                                ", m=" + std::to_string(m));
  }

  // Per-row logits as plain vectors plus (shared) tape slices for gradient routing.
  std::vector<std::vector<double>> theta(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(m)));
  for (std::int64_t v = 0; v < n; ++v) {
    for (std::int64_t j = 0; j < m; ++j) theta[static_cast<std::size_t>(v)][static_cast<std::size_t>(j)] = priors.at(v, j);
  }
  std::vector<Tensor> row_slices;
  row_slices.reserve(static_cast<std::size_t>(n));
  for (std::int64_t v = 0; v < n; ++v) row_slices.push_back(gather_rows(priors, {v}));

  std::vector<AssignmentSample> out;
  out.reserve(static_cast<std::size_t>(q));
  for (std::int64_t s = 0; s < q; ++s) {
    std::vector<std::vector<std::int32_t>> structure(static_cast<std::size_t>(n));
    std::vector<Tensor> h_rows;
    h_rows.reserve(static_cast<std::size_t>(n));
    for (std::int64_t v = 0; v < n; ++v) {
      Rng rng = Rng::derive(seed, {graph_index, static_cast<std::uint64_t>(s), static_cast<std::uint64_t>(v)});
      std::vector<std::int32_t> chosen = sample_row(theta[static_cast<std::size_t>(v)], k, rng);
      std::vector<double> bits(static_cast<std::size_t>(m), 0.0);
      for (std::int32_t c : chosen) bits[static_cast<std::size_t>(c)] = 1.0;
      structure[static_cast<std::size_t>(v)] = std::move(chosen);

      std::vector<double> theta_v = theta[static_cast<std::size_t>(v)];
      Tensor h_row = custom_grad(
          tape, Tensor({1, m}, std::move(bits)), {row_slices[static_cast<std::size_t>(v)]},
          [theta_v, k](const std::vector<double>& upstream) {
            return std::vector<std::vector<double>>{marginal_jacobian_vp(theta_v, k, upstream)};
          });
      h_rows.push_back(std::move(h_row));
    }
    AssignmentSample sample;
    sample.structure = AssignmentMatrix(n, m, k, std::move(structure));
    sample.weights = concat_rows(h_rows);
    out.push_back(std::move(sample));
  }
  return out;
}

Tensor relaxed_assignment(const Tensor& priors, std::int64_t k) {
  if (priors.rank() != 2) {
    throw std::invalid_argument("priors must be [n x m], got shape " + shape_str(priors.shape()));
  }
  const std::int64_t n = priors.rows(), m = priors.cols();
  if (k < 1 || k > m) {
    throw std::invalid_argument("relaxed_assignment needs 1 <= k <= m, got k=" + std::to_string(k) +
                                ", m=" + std::to_string(m));
  }
  const Tensor neg_inf = Tensor::scalar(kNegInf);
  const Tensor zero = Tensor::scalar(0.0);

  std::vector<Tensor> mu_rows;
  mu_rows.reserve(static_cast<std::size_t>(n));
  for (std::int64_t v = 0; v < n; ++v) {
    Tensor row = clamp(reshape(gather_rows(priors, {v}), {m, 1}), -kLogitClamp, kLogitClamp);
    std::vector<Tensor> lw;
    lw.reserve(static_cast<std::size_t>(m));
    for (std::int64_t j = 0; j < m; ++j) lw.push_back(reshape(gather_rows(row, {j}), {}));

    // The same prefix/suffix program as the sampling path, expressed in tape
    // scalars so reverse mode differentiates the marginals directly.
    auto cell = [&](std::vector<std::vector<Tensor>>& tbl, std::int64_t i, std::int64_t t) -> Tensor& {
      return tbl[static_cast<std::size_t>(i)][static_cast<std::size_t>(t)];
    };
    std::vector<std::vector<Tensor>> LF(static_cast<std::size_t>(m + 1),
                                        std::vector<Tensor>(static_cast<std::size_t>(k + 1), neg_inf));
    for (std::int64_t i = 0; i <= m; ++i) cell(LF, i, 0) = zero;
    for (std::int64_t i = 1; i <= m; ++i) {
      for (std::int64_t t = 1; t <= std::min(i, k); ++t) {
        cell(LF, i, t) = logaddexp(cell(LF, i - 1, t), add(lw[static_cast<std::size_t>(i - 1)], cell(LF, i - 1, t - 1)));
      }
    }
    std::vector<std::vector<Tensor>> LS(static_cast<std::size_t>(m + 2),
                                        std::vector<Tensor>(static_cast<std::size_t>(k + 1), neg_inf));
    for (std::int64_t i = 1; i <= m + 1; ++i) cell(LS, i, 0) = zero;
    for (std::int64_t i = m; i >= 1; --i) {
      for (std::int64_t t = 1; t <= std::min(m - i + 1, k); ++t) {
        cell(LS, i, t) = logaddexp(cell(LS, i + 1, t), add(lw[static_cast<std::size_t>(i - 1)], cell(LS, i + 1, t - 1)));
      }
    }
    Tensor logZ = cell(LF, m, k);
    std::vector<Tensor> mu;
    mu.reserve(static_cast<std::size_t>(m));
    for (std::int64_t j = 1; j <= m; ++j) {
      Tensor acc = neg_inf;
      for (std::int64_t t = 0; t <= k - 1; ++t) {
        acc = logaddexp(acc, add(cell(LF, j - 1, t), cell(LS, j + 1, k - 1 - t)));
      }
      mu.push_back(reshape(texp(sub(add(lw[static_cast<std::size_t>(j - 1)], acc), logZ)), {1, 1}));
    }
    mu_rows.push_back(reshape(concat_rows(mu), {1, m}));
  }
  return concat_rows(mu_rows);
}

}  // namespace exactk
}  // namespace ipr
